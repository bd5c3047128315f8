"""FastSLAM with per-landmark 2D EKFs and descriptor data association.

Each particle carries a pose and its own landmark map. The map update
matches observed features against the particle's in-range landmarks with
a Lowe ratio test, updates or spawns landmark EKFs, scores the particle,
and culls in-range landmarks that keep going unmatched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .estcore import (
    InvalidArgumentError,
    NumericalDegeneracyError,
    normalize_log_weights,
    systematic_resample,
)
from .features import DESCRIPTOR_BITS, DESCRIPTOR_WORDS, RATIO, FeatureMap, best_2_matches, best_two_rows, hamming_matrix
from .mcl import (
    DEFAULT_FOV,
    FeatureFrame,
    KeyframeConfig,
    MotionDelta,
    MotionNoise,
    Pose2D,
    estimate_pose_array,
    keyframe_should_update,
    move_poses,
)
from .parallel import particle_map


def get_perceptual_range(height: float, fov=DEFAULT_FOV) -> float:
    """Radius of the largest ground circle fully inside the camera view."""
    if not height > 0:
        raise InvalidArgumentError(f"height must be positive, got {height!r}")
    return height * math.tan(min(fov) / 2.0)


@dataclass
class LandmarkEKF:
    mean: np.ndarray
    cov: np.ndarray
    descriptor: np.ndarray
    counter: int = 0
    matched: bool = False


@dataclass(frozen=True)
class SlamConfig:
    new_landmark_threshold: float = 0.3
    ratio: float = RATIO
    importance_scale: float = 0.05
    camera_fov: tuple = DEFAULT_FOV
    landmark_meas_cov: tuple = ((0.003 ** 2, 0.0), (0.0, 0.003 ** 2))
    motion_noise: MotionNoise = MotionNoise(0.001, 0.001, 0.002)
    keyframe: KeyframeConfig = KeyframeConfig()
    # stands in for the runner-up distance when only one landmark is in range:
    # the expected distance between unrelated descriptors
    lone_reference_dist: float = DESCRIPTOR_BITS / 2

    def __post_init__(self):
        if not 0.0 < self.new_landmark_threshold < 1.0:
            raise InvalidArgumentError("new_landmark_threshold must lie strictly inside (0, 1)")
        if self.importance_scale <= 0:
            raise InvalidArgumentError("importance_scale must be positive")
        if self.lone_reference_dist <= 0:
            raise InvalidArgumentError("lone_reference_dist must be positive")

    @property
    def meas_cov(self) -> np.ndarray:
        return np.asarray(self.landmark_meas_cov, dtype=float)


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def init_landmark_ekf(pose, offset, descriptor, meas_cov) -> LandmarkEKF:
    R = _rot(pose[2])
    mean = np.asarray(pose[:2], dtype=float) + R @ np.asarray(offset, dtype=float)
    cov = R @ np.asarray(meas_cov, dtype=float) @ R.T
    return LandmarkEKF(mean, 0.5 * (cov + cov.T), np.asarray(descriptor, dtype=np.uint64).copy(), 0)


def _ekf_update_arrays(pose, offsets, means, covs, meas_cov):
    """Vectorized landmark EKF update; the measurement model is
    offset = R(theta)^T (mean - xy), so H = R(theta)^T."""
    Rt = _rot(pose[2]).T
    pred = (means - np.asarray(pose[:2], dtype=float)) @ Rt.T
    innov = offsets - pred
    HS = np.einsum("ij,kjl->kil", Rt, covs)          # H Sigma
    S = np.einsum("kij,lj->kil", HS, Rt) + meas_cov   # H Sigma H^T + Q
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
    if np.any(np.abs(det) < 1e-300):
        raise NumericalDegeneracyError("landmark innovation covariance is singular")
    S_inv = np.empty_like(S)
    S_inv[:, 0, 0] = S[:, 1, 1] / det
    S_inv[:, 1, 1] = S[:, 0, 0] / det
    S_inv[:, 0, 1] = -S[:, 0, 1] / det
    S_inv[:, 1, 0] = -S[:, 1, 0] / det
    K = np.einsum("kji,kjl->kil", HS, S_inv)          # Sigma H^T S^-1
    new_means = means + np.einsum("kij,kj->ki", K, innov)
    new_covs = covs - np.einsum("kij,kjl->kil", K, HS)
    new_covs = 0.5 * (new_covs + np.transpose(new_covs, (0, 2, 1)))
    return new_means, new_covs


def update_landmark_ekf(pose, offset, lm: LandmarkEKF, meas_cov) -> LandmarkEKF:
    m, c = _ekf_update_arrays(pose, np.asarray(offset, float)[None], lm.mean[None],
                              np.asarray(lm.cov, float)[None], np.asarray(meas_cov, float))
    return LandmarkEKF(m[0], c[0], lm.descriptor.copy(), lm.counter, lm.matched)


class LandmarkSet:
    """Struct-of-arrays landmark list owned by exactly one particle."""

    def __init__(self, means=None, covs=None, descriptors=None, counters=None):
        self.means = np.zeros((0, 2)) if means is None else np.asarray(means, float).reshape(-1, 2)
        self.covs = np.zeros((0, 2, 2)) if covs is None else np.asarray(covs, float).reshape(-1, 2, 2)
        self.descriptors = (np.zeros((0, DESCRIPTOR_WORDS), np.uint64) if descriptors is None
                            else np.asarray(descriptors, np.uint64).reshape(-1, DESCRIPTOR_WORDS))
        self.counters = (np.zeros(0, np.int64) if counters is None
                         else np.asarray(counters, np.int64).reshape(-1))

    def __len__(self):
        return len(self.means)

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.means.copy(), self.covs.copy(), self.descriptors.copy(),
                           self.counters.copy())

    def get(self, i: int) -> LandmarkEKF:
        return LandmarkEKF(self.means[i].copy(), self.covs[i].copy(),
                           self.descriptors[i].copy(), int(self.counters[i]))

    def __iter__(self):
        return (self.get(i) for i in range(len(self)))

    @classmethod
    def from_landmarks(cls, lms) -> "LandmarkSet":
        lms = list(lms)
        if not lms:
            return cls()
        return cls([l.mean for l in lms], [l.cov for l in lms],
                   [l.descriptor for l in lms], [l.counter for l in lms])


@dataclass
class SlamParticle:
    pose: np.ndarray
    log_weight: float = 0.0
    landmarks: LandmarkSet = field(default_factory=LandmarkSet)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(3)

    def copy(self) -> "SlamParticle":
        return SlamParticle(self.pose.copy(), self.log_weight, self.landmarks.copy())


class UpdateStats(NamedTuple):
    in_range: int
    matched: int
    created: int
    removed: int


def _particle_map_update(p: SlamParticle, frame: FeatureFrame, cfg: SlamConfig, r: float):
    """Map update for one particle. Returns the new particle and counts."""
    lms = p.landmarks
    pose = p.pose
    k = len(frame)
    if len(lms):
        d2 = np.sum((lms.means - pose[:2]) ** 2, axis=1)
        in_range = np.flatnonzero(d2 <= r * r)
    else:
        in_range = np.zeros(0, dtype=np.intp)
    if len(in_range) >= 2 and k:
        D = hamming_matrix(frame.descriptors, lms.descriptors[in_range])
        i1, d1, _, d2_ = best_two_rows(D)
        accept = ~(d1 > cfg.ratio * d2_)
    elif len(in_range) == 1 and k:
        d1 = hamming_matrix(frame.descriptors, lms.descriptors[in_range])[:, 0].astype(np.float64)
        i1 = np.zeros(k, dtype=np.intp)
        d2_ = np.full(k, float(cfg.lone_reference_dist))
        accept = ~(d1 > cfg.ratio * d2_)
    else:
        i1 = np.zeros(k, dtype=np.intp)
        d1 = d2_ = np.zeros(k, dtype=np.int64)
        accept = np.zeros(k, dtype=bool)

    means = lms.means.copy()
    covs = lms.covs.copy()
    counters = lms.counters.copy()
    meas_cov = cfg.meas_cov

    rows = np.flatnonzero(accept)
    targets = in_range[i1[rows]]
    # a landmark hit by several features is updated once per feature, in feature order
    remaining_rows, remaining_targets = rows, targets
    while len(remaining_rows):
        _, first = np.unique(remaining_targets, return_index=True)
        first = np.sort(first)
        rr, tt = remaining_rows[first], remaining_targets[first]
        means[tt], covs[tt] = _ekf_update_arrays(pose, frame.offsets[rr], means[tt], covs[tt], meas_cov)
        keep = np.ones(len(remaining_rows), dtype=bool)
        keep[first] = False
        remaining_rows, remaining_targets = remaining_rows[keep], remaining_targets[keep]

    new_rows = np.flatnonzero(~accept)
    n_new = len(new_rows)
    log_w = p.log_weight + n_new * math.log(cfg.new_landmark_threshold)
    log_w += cfg.importance_scale * float(np.sum(d2_[rows] - d1[rows]))

    matched = np.zeros(len(lms), dtype=bool)
    matched[targets] = True
    counters[in_range] += np.where(matched[in_range], 1, -1)
    keep = np.ones(len(lms), dtype=bool)
    keep[in_range] = counters[in_range] >= 0

    if n_new:
        R = _rot(pose[2])
        new_means = pose[:2] + frame.offsets[new_rows] @ R.T
        cov0 = R @ meas_cov @ R.T
        cov0 = 0.5 * (cov0 + cov0.T)
        new_covs = np.broadcast_to(cov0, (n_new, 2, 2))
        # new landmarks are flagged matched, so the counter pass lifts them to 1
        new_counters = np.ones(n_new, dtype=np.int64)
        out = LandmarkSet(np.concatenate([means[keep], new_means]),
                          np.concatenate([covs[keep], new_covs]),
                          np.concatenate([lms.descriptors[keep], frame.descriptors[new_rows]]),
                          np.concatenate([counters[keep], new_counters]))
    else:
        out = LandmarkSet(means[keep], covs[keep], lms.descriptors[keep], counters[keep])
    stats = UpdateStats(len(in_range), len(rows), n_new, int((~keep).sum()))
    return SlamParticle(pose.copy(), log_w, out), stats


def map_update(particles: List[SlamParticle], frame: FeatureFrame, cfg: SlamConfig):
    """Associate the frame's features with each particle's map and reweight.

    Returns new particles; the inputs are not modified.
    """
    if not frame.height > 0:
        raise InvalidArgumentError("frame height must be positive")
    r = get_perceptual_range(frame.height, cfg.camera_fov)
    inside = np.sum(frame.offsets ** 2, axis=1) <= r * r
    if not inside.all():
        # observations beyond the perceptual range neither match nor seed landmarks
        frame = FeatureFrame(frame.timestamp, frame.height, frame.offsets[inside],
                             frame.descriptors[inside])
    results = particle_map(lambda i, p: _particle_map_update(p, frame, cfg, r), particles)
    return [res[0] for res in results]


@dataclass
class SlamState:
    particles: List[SlamParticle]
    steps_since_update: int = 0
    last_update_pose: Optional[np.ndarray] = None
    best_index: int = 0
    best_log_weight: float = 0.0

    def __len__(self):
        return len(self.particles)

    def poses(self) -> np.ndarray:
        return np.array([p.pose for p in self.particles])

    def log_weights(self) -> np.ndarray:
        return np.array([p.log_weight for p in self.particles])


def init_slam(pose, n: int) -> SlamState:
    if n < 1:
        raise InvalidArgumentError("particle count must be >= 1")
    pose = np.asarray(pose, dtype=float)
    return SlamState([SlamParticle(pose.copy()) for _ in range(n)], 0, pose.copy())


class SlamStepResult(NamedTuple):
    state: SlamState
    estimate: Pose2D
    updated: bool


def slam_step(state: SlamState, delta: MotionDelta, frame: Optional[FeatureFrame],
              cfg: SlamConfig, rng: np.random.Generator) -> SlamStepResult:
    """Motion on every particle, keyframe-gated map update, then resampling."""
    n = len(state)
    poses = state.poses()
    eps = rng.standard_normal((n, 3)) * np.asarray(cfg.motion_noise, dtype=float)
    poses = move_poses(poses, delta, eps)
    particles = [SlamParticle(poses[i], p.log_weight, p.landmarks)
                 for i, p in enumerate(state.particles)]
    new = SlamState(particles, state.steps_since_update + 1,
                    state.last_update_pose, state.best_index, state.best_log_weight)
    est = estimate_pose_array(poses, new.log_weights())
    if new.last_update_pose is None:
        new.last_update_pose = est
    drift = float(np.hypot(*(est[:2] - new.last_update_pose[:2])))
    updated = False
    if frame is not None and keyframe_should_update(new.steps_since_update, drift, cfg.keyframe):
        particles = map_update(particles, frame, cfg)
        lw = np.array([p.log_weight for p in particles])
        w = normalize_log_weights(lw)
        est = estimate_pose_array(np.array([p.pose for p in particles]), lw)
        best = int(np.argmax(w))
        idx = systematic_resample(lw, n, rng)
        resampled = []
        for j in idx:
            q = particles[j].copy()
            q.log_weight = 0.0
            resampled.append(q)
        new = SlamState(resampled, 0, est, int(np.flatnonzero(idx == best)[0]), float(lw[best]))
        updated = True
    return SlamStepResult(new, Pose2D(*map(float, est)), updated)


class PoseTraceRow(NamedTuple):
    timestamp: float
    x: float
    y: float
    theta: float
    n_landmarks: int
    log_weight: float


@dataclass
class OfflineSlamResult:
    feature_map: FeatureMap
    trace: List[PoseTraceRow]
    state: SlamState


def export_map(particle: SlamParticle, bounds=None) -> FeatureMap:
    lms = particle.landmarks
    if bounds is None:
        hi = lms.means.max(axis=0) if len(lms) else np.zeros(2)
        bounds = (float(max(hi[0], 0.0)), float(max(hi[1], 0.0)))
    return FeatureMap(bounds, np.arange(len(lms)), lms.means, lms.descriptors)


def offline_slam(log, cfg: SlamConfig = SlamConfig(), rng: Optional[np.random.Generator] = None,
                 n_particles: int = 40, start_pose=None, bounds=None) -> OfflineSlamResult:
    """Replay a recorded log's frames through slam_step and export the best map.

    The map frame is anchored at ``start_pose`` (default: the first truth pose
    in the log, else the origin).
    """
    from .sim import FrameRecord, TruthRecord

    if rng is None:
        rng = np.random.default_rng(0)
    records = sorted(log.records, key=lambda r: r.t) if log.records else []
    frames = [r for r in records if isinstance(r, FrameRecord)]
    if not frames:
        raise InvalidArgumentError("log contains no frames")
    if start_pose is None:
        truth = [r for r in records if isinstance(r, TruthRecord)]
        start_pose = truth[0].pose if truth else (0.0, 0.0, 0.0)
    state = init_slam(start_pose, n_particles)
    trace = []
    for fr in frames:
        if not fr.frame.height > 0:
            raise InvalidArgumentError(f"frame at t={fr.t} has no valid height")
        res = slam_step(state, fr.delta, fr.frame, cfg, rng)
        state = res.state
        if res.updated:
            best = state.particles[state.best_index]
            trace.append(PoseTraceRow(fr.t, res.estimate.x, res.estimate.y, res.estimate.theta,
                                      len(best.landmarks), state.best_log_weight))
    best = state.particles[state.best_index]
    return OfflineSlamResult(export_map(best, bounds), trace, state)


def write_pose_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PoseTraceRow._fields)
        for r in rows:
            w.writerow([repr(float(r.timestamp)), repr(float(r.x)), repr(float(r.y)),
                        repr(float(r.theta)), int(r.n_landmarks), repr(float(r.log_weight))])


__all__ = [
    "LandmarkEKF", "LandmarkSet", "SlamParticle", "SlamConfig", "SlamState",
    "get_perceptual_range", "best_2_matches", "init_landmark_ekf", "update_landmark_ekf",
    "map_update", "slam_step", "offline_slam", "export_map", "write_pose_trace", "init_slam",
]
