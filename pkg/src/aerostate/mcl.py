"""Monte Carlo localization over a known feature map.

Particles move with a noisy odometry model driven by frame-to-frame
transforms. On keyframes each particle matches the frame's features
against map features near itself, solves for the camera pose, and is
weighted by how close that pose is to its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .estcore import (
    DegenerateWeightsError,
    EstimationError,
    InvalidArgumentError,
    angle_wrap,
    log_gaussian_prob,
    normalize_log_weights,
    systematic_resample,
)
from .features import (
    DESCRIPTOR_WORDS,
    RATIO,
    FeatureMap,
    best_two_rows,
    hamming_matrix,
    ratio_test,
)
from .parallel import particle_map

DEFAULT_FOV = (math.radians(62.2), math.radians(48.8))
FLOOR_LOG_LIKELIHOOD = math.log(1e-6)


class InsufficientMatchesError(EstimationError):
    pass


class Pose2D(NamedTuple):
    x: float
    y: float
    theta: float


class MotionDelta(NamedTuple):
    dx: float
    dy: float
    dtheta: float


class MotionNoise(NamedTuple):
    sx: float = 0.0
    sy: float = 0.0
    stheta: float = 0.0


class MeasurementNoise(NamedTuple):
    sx: float = 0.05
    sy: float = 0.05
    stheta: float = 0.1


@dataclass
class Particle:
    pose: Pose2D
    log_weight: float = 0.0


@dataclass
class FeatureFrame:
    """Features seen in one camera frame, as offsets from the camera center
    on the ground plane (body axes, meters), plus the IR height."""

    timestamp: float
    height: float
    offsets: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint64).reshape(-1, DESCRIPTOR_WORDS)
        if len(self.offsets) != len(self.descriptors):
            raise InvalidArgumentError("offsets and descriptors differ in length")

    def __len__(self):
        return len(self.offsets)

    @property
    def observations(self):
        return list(zip(map(tuple, self.offsets), self.descriptors))


@dataclass(frozen=True)
class KeyframeConfig:
    max_motion_steps: int = 5
    max_drift: float = 0.05

    def __post_init__(self):
        if self.max_motion_steps <= 0 or self.max_drift <= 0:
            raise InvalidArgumentError("keyframe limits must be positive")


@dataclass(frozen=True)
class MclConfig:
    motion_noise: MotionNoise = MotionNoise(0.005, 0.005, 0.01)
    measurement_noise: MeasurementNoise = MeasurementNoise()
    keyframe: KeyframeConfig = KeyframeConfig()
    camera_fov: tuple = DEFAULT_FOV
    floor_log_likelihood: float = FLOOR_LOG_LIKELIHOOD
    ratio: float = RATIO
    inlier_tol: float = 0.05
    inject_measurement_noise: bool = True


@dataclass
class ParticleSet:
    """Poses (N, 3) and log-weights (N,) with the keyframe bookkeeping."""

    poses: np.ndarray
    log_weights: np.ndarray
    steps_since_update: int = 0
    last_update_pose: Optional[np.ndarray] = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if len(self.poses) < 1 or len(self.poses) != len(self.log_weights):
            raise InvalidArgumentError("need at least one particle and one weight per particle")

    def __len__(self):
        return len(self.poses)

    def particles(self):
        return [Particle(Pose2D(*map(float, p)), float(w)) for p, w in zip(self.poses, self.log_weights)]

    @classmethod
    def from_particles(cls, particles):
        return cls([p.pose for p in particles], [p.log_weight for p in particles])

    def copy(self) -> "ParticleSet":
        lp = None if self.last_update_pose is None else self.last_update_pose.copy()
        return ParticleSet(self.poses.copy(), self.log_weights.copy(), self.steps_since_update, lp)


def init_particles(pose, n: int, spread=(0.0, 0.0, 0.0), rng=None) -> ParticleSet:
    """``n`` particles around ``pose`` with Gaussian spread (sx, sy, stheta)."""
    if n < 1:
        raise InvalidArgumentError("particle count must be >= 1")
    poses = np.tile(np.asarray(pose, dtype=float), (n, 1))
    if rng is not None and any(spread):
        poses += rng.standard_normal((n, 3)) * np.asarray(spread, dtype=float)
        poses[:, 2] = angle_wrap(poses[:, 2])
    ps = ParticleSet(poses, np.zeros(n))
    ps.last_update_pose = estimate_pose_array(ps.poses, ps.log_weights)
    return ps


def init_particles_uniform(bounds, n: int, rng: np.random.Generator) -> ParticleSet:
    poses = np.column_stack([
        rng.uniform(0, bounds[0], n),
        rng.uniform(0, bounds[1], n),
        rng.uniform(-math.pi, math.pi, n),
    ])
    return ParticleSet(poses, np.zeros(n))


def move_poses(poses: np.ndarray, delta, noise_draws: np.ndarray) -> np.ndarray:
    """Odometry model on an (N, 3) pose array given pre-scaled noise (N, 3)."""
    d = np.asarray(delta, dtype=float) + noise_draws
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + d[:, 0] * c - d[:, 1] * s
    out[:, 1] = poses[:, 1] + d[:, 0] * s + d[:, 1] * c
    out[:, 2] = angle_wrap(poses[:, 2] + d[:, 2])
    return out


def sample_motion_model(p: Particle, d: MotionDelta, n: MotionNoise,
                        rng: np.random.Generator) -> Particle:
    eps = rng.standard_normal(3) * np.asarray(n, dtype=float)
    moved = move_poses(np.asarray([p.pose], dtype=float), d, eps[None, :])[0]
    return Particle(Pose2D(*map(float, moved)), p.log_weight)


def fit_rigid_2d(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation angle and translation with dst ~ R(theta) src + t."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    theta = math.atan2(float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])),
                       float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])))
    c, s = math.cos(theta), math.sin(theta)
    t = cd - np.array([c * cs[0] - s * cs[1], s * cs[0] + c * cs[1]])
    return theta, t


def _robust_pose(src, dst, inlier_tol):
    theta, t = fit_rigid_2d(src, dst)
    c, s = math.cos(theta), math.sin(theta)
    pred = src @ np.array([[c, s], [-s, c]]) + t
    err = np.hypot(*(pred - dst).T)
    inliers = err <= inlier_tol
    n_in = int(inliers.sum())
    if n_in < len(src):
        if n_in < 2:
            raise InsufficientMatchesError("fewer than two inlier matches")
        theta, t = fit_rigid_2d(src[inliers], dst[inliers])
    return Pose2D(float(t[0]), float(t[1]), angle_wrap(theta)), n_in


class LocalMatcher:
    """Descriptor distances between one frame and the map features around a
    region, computed once and reused for every particle in that region.

    ``match(center, radius)`` gives the same answer as matching the frame
    against only the map features within ``radius`` of ``center``.
    """

    TOP = 8

    def __init__(self, frame: FeatureFrame, fmap: FeatureMap, center, radius: float,
                 ratio: float = RATIO):
        self.frame = frame
        self.ratio = ratio
        self.cand = fmap.query_radius(center, radius)
        self.positions = fmap.positions[self.cand]
        self.D = hamming_matrix(frame.descriptors, fmap.descriptors[self.cand])
        n_cand = len(self.cand)
        self.top_n = min(self.TOP, n_cand)
        if self.top_n:
            part = np.argpartition(self.D, self.top_n - 1, axis=1)[:, :self.top_n]
            dpart = np.take_along_axis(self.D, part, axis=1)
            order = np.lexsort((part, dpart), axis=1)
            self.top = np.take_along_axis(part, order, axis=1)
            self.top_d = np.take_along_axis(dpart, order, axis=1)
        else:
            self.top = np.zeros((len(frame), 0), dtype=np.intp)
            self.top_d = np.zeros((len(frame), 0), dtype=np.int32)

    def match(self, center, radius: float):
        """Frame rows and candidate columns passing the ratio test."""
        k = len(self.frame)
        if len(self.cand) < 2 or k == 0:
            return np.zeros(0, np.intp), np.zeros(0, np.intp)
        d2 = np.sum((self.positions - np.asarray(center, dtype=float)[:2]) ** 2, axis=1)
        in_r = d2 <= radius * radius
        if in_r.sum() < 2:
            return np.zeros(0, np.intp), np.zeros(0, np.intp)
        ok = in_r[self.top]
        rank = np.cumsum(ok, axis=1)
        n_ok = rank[:, -1]
        first = np.argmax(ok, axis=1)
        second = np.argmax(ok & (rank == 2), axis=1)
        rows = np.arange(k)
        i1 = self.top[rows, first]
        d1 = self.top_d[rows, first]
        i2 = self.top[rows, second]
        d2_ = self.top_d[rows, second]
        # every candidate is in the top list, so n_ok >= 2 holds for all rows
        exhausted = self.top_n == len(self.cand)
        # with one in-range candidate in the top list the runner-up is at least
        # the last listed distance; decide from that bound when possible
        bound = self.top_d[:, -1]
        accept = np.zeros(k, dtype=bool)
        exact = n_ok >= 2
        accept[exact] = ratio_test(d1[exact], d2_[exact], self.ratio)
        one = (n_ok == 1) & (not exhausted)
        sure = one & (d1 <= self.ratio * bound)
        accept[sure] = True
        pending = np.flatnonzero((n_ok < 2) & ~sure) if not exhausted else np.zeros(0, np.intp)
        if len(pending):
            cols = np.flatnonzero(in_r)
            sub = self.D[np.ix_(pending, cols)]
            j1, e1, _, e2 = best_two_rows(sub)
            acc = ratio_test(e1, e2, self.ratio)
            accept[pending] = acc
            i1[pending] = cols[j1]
        sel = np.flatnonzero(accept)
        return sel, i1[sel]

    def locate(self, center, radius: float, inlier_tol: float = 0.05):
        rows, cols = self.match(center, radius)
        if len(rows) < 2:
            raise InsufficientMatchesError(f"only {len(rows)} descriptor matches")
        return _robust_pose(self.frame.offsets[rows], self.positions[cols], inlier_tol)


def compute_location(frame: FeatureFrame, fmap: FeatureMap, near, search_radius: float,
                     ratio: float = RATIO, inlier_tol: float = 0.05):
    """Camera pose and inlier count from matches against map features near ``near``."""
    if len(frame) == 0:
        raise InvalidArgumentError("frame has no features")
    m = LocalMatcher(frame, fmap, near, search_radius, ratio)
    return m.locate(near, search_radius, inlier_tol)


def perceptual_range(height: float, fov=DEFAULT_FOV) -> float:
    if not height > 0:
        raise InvalidArgumentError(f"height must be positive, got {height!r}")
    return height * math.tan(min(fov) / 2.0)


def location_log_likelihood(location, pose, mn: MeasurementNoise, noise=(0.0, 0.0, 0.0),
                            floor: float = FLOOR_LOG_LIKELIHOOD) -> float:
    """Sum of log normal densities of the (optionally noise-perturbed) location
    residuals against ``pose``; never below ``floor``."""
    lx, ly, lt = np.asarray(location, dtype=float) + np.asarray(noise, dtype=float)
    rx = lx - pose[0]
    ry = ly - pose[1]
    rt = angle_wrap(lt - pose[2])
    lq = (log_gaussian_prob(rx, mn.sx) + log_gaussian_prob(ry, mn.sy)
          + log_gaussian_prob(rt, mn.stheta))
    return max(float(lq), floor)


def measurement_model(p: Particle, frame: FeatureFrame, fmap: FeatureMap,
                      mn: MeasurementNoise, rng: Optional[np.random.Generator] = None,
                      cfg: MclConfig = MclConfig()) -> float:
    """Log-likelihood of ``frame`` for one particle. Without ``rng`` the
    location is used without added observation noise."""
    radius = perceptual_range(frame.height, cfg.camera_fov) + 3.0 * mn.sx
    noise = (0.0, 0.0, 0.0) if rng is None else rng.standard_normal(3) * np.asarray(mn)
    try:
        loc, _ = compute_location(frame, fmap, p.pose, radius, cfg.ratio, cfg.inlier_tol)
    except (InsufficientMatchesError, InvalidArgumentError):
        return cfg.floor_log_likelihood
    return location_log_likelihood(loc, p.pose, mn, noise, cfg.floor_log_likelihood)


def keyframe_should_update(steps_since_update: int, drift_since_update: float,
                           cfg: KeyframeConfig) -> bool:
    return steps_since_update >= cfg.max_motion_steps or drift_since_update >= cfg.max_drift


def estimate_pose_array(poses: np.ndarray, log_weights: np.ndarray) -> np.ndarray:
    w = normalize_log_weights(log_weights)
    x = float(w @ poses[:, 0])
    y = float(w @ poses[:, 1])
    th = math.atan2(float(w @ np.sin(poses[:, 2])), float(w @ np.cos(poses[:, 2])))
    return np.array([x, y, angle_wrap(th)])


def estimate_pose(particles) -> Pose2D:
    """Weighted mean position and circular weighted mean heading."""
    if isinstance(particles, ParticleSet):
        poses, lw = particles.poses, particles.log_weights
    else:
        poses = np.asarray([p.pose for p in particles], dtype=float)
        lw = np.asarray([p.log_weight for p in particles], dtype=float)
    return Pose2D(*map(float, estimate_pose_array(poses, lw)))


def batch_log_likelihood(poses: np.ndarray, frame: FeatureFrame, fmap: FeatureMap,
                         cfg: MclConfig, noise: np.ndarray) -> np.ndarray:
    """Measurement log-likelihood for every particle pose, sharing one
    descriptor distance matrix over the region covering the cloud."""
    mn = cfg.measurement_noise
    if len(frame) == 0:
        return np.full(len(poses), cfg.floor_log_likelihood)
    radius = perceptual_range(frame.height, cfg.camera_fov) + 3.0 * mn.sx
    center = poses[:, :2].mean(axis=0)
    spread = float(np.sqrt(np.max(np.sum((poses[:, :2] - center) ** 2, axis=1))))
    matcher = LocalMatcher(frame, fmap, center, spread + radius + 1e-9, cfg.ratio)

    def one(i, pose):
        try:
            loc, _ = matcher.locate(pose, radius, cfg.inlier_tol)
        except InsufficientMatchesError:
            return cfg.floor_log_likelihood
        return location_log_likelihood(loc, pose, mn, noise[i], cfg.floor_log_likelihood)

    return np.asarray(particle_map(one, poses), dtype=float)


class StepResult(NamedTuple):
    particles: ParticleSet
    estimate: Pose2D
    updated: bool
    reinitialized: bool


def mcl_step(particles: ParticleSet, delta: MotionDelta, frame: Optional[FeatureFrame],
             fmap: Optional[FeatureMap], cfg: MclConfig, rng: np.random.Generator) -> StepResult:
    """One motion step and, on keyframes, one measurement update with resampling."""
    n = len(particles)
    ps = particles.copy()
    eps = rng.standard_normal((n, 3)) * np.asarray(cfg.motion_noise, dtype=float)
    ps.poses = move_poses(ps.poses, delta, eps)
    ps.steps_since_update += 1
    est = estimate_pose_array(ps.poses, ps.log_weights)
    if ps.last_update_pose is None:
        ps.last_update_pose = est
    drift = float(np.hypot(*(est[:2] - ps.last_update_pose[:2])))
    updated = reinit = False
    if frame is not None and fmap is not None and keyframe_should_update(
            ps.steps_since_update, drift, cfg.keyframe):
        if cfg.inject_measurement_noise:
            noise = rng.standard_normal((n, 3)) * np.asarray(cfg.measurement_noise, dtype=float)
        else:
            noise = np.zeros((n, 3))
        ps.log_weights = ps.log_weights + batch_log_likelihood(ps.poses, frame, fmap, cfg, noise)
        ps, reinit = _resample(ps, rng, fmap.bounds)
        est = estimate_pose_array(ps.poses, ps.log_weights)
        ps.steps_since_update = 0
        ps.last_update_pose = est
        updated = True
    return StepResult(ps, Pose2D(*map(float, est)), updated, reinit)


def _resample(ps: ParticleSet, rng, bounds):
    n = len(ps)
    try:
        idx = systematic_resample(ps.log_weights, n, rng)
    except DegenerateWeightsError:
        fresh = init_particles_uniform(bounds, n, rng)
        return replace(fresh, steps_since_update=ps.steps_since_update), True
    ps.poses = ps.poses[idx]
    ps.log_weights = np.zeros(n)
    return ps, False


@dataclass
class MonteCarloLocalizer:
    """Stateful driver holding the particle set and the map."""

    fmap: FeatureMap
    particles: ParticleSet
    cfg: MclConfig = field(default_factory=MclConfig)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    n_updates: int = 0
    n_reinit: int = 0

    def step(self, delta, frame=None) -> Pose2D:
        res = mcl_step(self.particles, delta, frame, self.fmap, self.cfg, self.rng)
        self.particles = res.particles
        self.n_updates += res.updated
        self.n_reinit += res.reinitialized
        return res.estimate
