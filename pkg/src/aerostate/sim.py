"""Deterministic world, trajectory and sensor simulator.

Stands in for the quadrotor, its sensors and the motion-capture rig. All
randomness flows from explicit seeds, so a (world, trajectory, sensors,
seed) tuple always yields the same log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .estcore import InvalidArgumentError, angle_wrap, rotation_matrix_zyx
from .features import FeatureMap, flip_bits, random_descriptors
from .mcl import DEFAULT_FOV, FeatureFrame, MotionDelta, MotionNoise, Pose2D, perceptual_range

SURFACE = (1.67, 1.65)
TARGET_DENSITY = 19200 / (SURFACE[0] * SURFACE[1])  # ~6,968 features per m^2


@dataclass
class World:
    bounds: tuple
    positions: np.ndarray
    descriptors: np.ndarray
    saliency: np.ndarray
    seed: int
    ids: np.ndarray = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.positions), dtype=np.int64)
        self._map = None

    def __len__(self):
        return len(self.positions)

    @property
    def density(self) -> float:
        return len(self) / (self.bounds[0] * self.bounds[1])

    def feature_map(self) -> FeatureMap:
        if self._map is None:
            self._map = FeatureMap(self.bounds, self.ids, self.positions, self.descriptors)
        return self._map


def generate_world(bounds=SURFACE, density: float = TARGET_DENSITY, seed: int = 0) -> World:
    """Jittered-grid features (one per cell) with random descriptors.

    Each feature also gets a random saliency; cameras report the most salient
    visible features first, which keeps frame-to-frame selections stable.
    """
    if not density > 0:
        raise InvalidArgumentError("density must be positive")
    w, h = float(bounds[0]), float(bounds[1])
    rng = np.random.default_rng(seed)
    nx = max(1, int(round(w * math.sqrt(density))))
    ny = max(1, int(round(h * math.sqrt(density))))
    cx, cy = w / nx, h / ny
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    jitter = rng.uniform(0.15, 0.85, size=(nx * ny, 2))
    pos = np.column_stack([(gx.ravel() + jitter[:, 0]) * cx, (gy.ravel() + jitter[:, 1]) * cy])
    desc = random_descriptors(len(pos), rng)
    saliency = rng.random(len(pos))
    return World((w, h), pos, desc, saliency, seed)


@dataclass
class TrajectorySpec:
    """Waypoints are (x, y, theta, height). Segments use minimum-jerk timing."""

    waypoints: list
    speed: float = 0.15
    yaw_rate: float = 0.5
    min_segment_time: float = 2.0
    hold: float = 0.0
    attitude_amplitude: float = math.radians(5.0)
    attitude_frequency: float = 0.5
    loop: bool = False

    def __post_init__(self):
        self.waypoints = [tuple(map(float, w)) for w in self.waypoints]
        if not self.waypoints:
            raise InvalidArgumentError("trajectory needs at least one waypoint")
        if any(w[3] <= 0 for w in self.waypoints):
            raise InvalidArgumentError("waypoint heights must be positive")
        if self.speed <= 0 or self.yaw_rate <= 0:
            raise InvalidArgumentError("speed and yaw rate must be positive")


def square_trajectory(bounds=SURFACE, side: float = 1.0, height: float = 0.55,
                      speed: float = 0.15, **kw) -> TrajectorySpec:
    cx, cy = bounds[0] / 2, bounds[1] / 2
    s = side / 2
    pts = [(cx - s, cy - s), (cx + s, cy - s), (cx + s, cy + s), (cx - s, cy + s)]
    wps = [(x, y, 0.0, height) for x, y in pts]
    wps.append(wps[0])
    return TrajectorySpec(wps, speed=speed, loop=True, **kw)


def hover_trajectory(bounds=SURFACE, height: float = 0.5, **kw) -> TrajectorySpec:
    return TrajectorySpec([(bounds[0] / 2, bounds[1] / 2, 0.0, height)], **kw)


def step_trajectory(bounds=SURFACE, height: float = 0.5, step: float = 0.3,
                    hold: float = 3.0, **kw) -> TrajectorySpec:
    """Hover, climb by ``step``, hover, descend back; repeated when looped."""
    cx, cy = bounds[0] / 2, bounds[1] / 2
    wps = [(cx, cy, 0.0, height), (cx, cy, 0.0, height + step), (cx, cy, 0.0, height)]
    kw.setdefault("min_segment_time", 1.5)
    return TrajectorySpec(wps, hold=hold, loop=True, **kw)


def handheld_trajectory(bounds=SURFACE, height: float = 0.5, speed: float = 0.2,
                        **kw) -> TrajectorySpec:
    """Slow hand-carried sweep: an inner loop, a cross pass and an outer loop,
    with gentle height changes and yaw turns, ending where it started."""
    w, h = bounds
    cx, cy = w / 2, h / 2
    pts = [
        (cx - 0.35, cy - 0.35, 0.0), (cx + 0.35, cy - 0.35, 0.3), (cx + 0.35, cy + 0.35, 0.6),
        (cx - 0.35, cy + 0.35, 0.3), (cx - 0.35, cy - 0.35, 0.0), (cx + 0.35, cy + 0.35, -0.4),
        (cx + 0.5, cy + 0.5, -0.2), (cx + 0.5, cy - 0.5, 0.0), (cx - 0.5, cy - 0.5, 0.3),
        (cx - 0.5, cy + 0.5, 0.0), (cx + 0.5, cy + 0.5, -0.3), (cx - 0.35, cy - 0.35, 0.0),
    ]
    hs = [height, height + 0.05, height, height - 0.05]
    wps = [(x, y, th, hs[i % len(hs)]) for i, (x, y, th) in enumerate(pts)]
    kw.setdefault("attitude_amplitude", math.radians(3.0))
    return TrajectorySpec(wps, speed=speed, loop=True, **kw)


TRAJECTORIES = {
    "square": square_trajectory,
    "hover": hover_trajectory,
    "step": step_trajectory,
    "handheld": handheld_trajectory,
}


def _min_jerk(tau):
    tau = np.clip(tau, 0.0, 1.0)
    s = tau ** 3 * (10 - 15 * tau + 6 * tau * tau)
    ds = 30 * tau ** 2 * (1 - tau) ** 2
    dds = 60 * tau * (1 - tau) * (1 - 2 * tau)
    return s, ds, dds


class Trajectory:
    """Sampled kinematics of a TrajectorySpec.

    ``sample(t)`` returns position (x, y, z), velocity, acceleration, yaw,
    roll and pitch for an array of times.
    """

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        wps = np.asarray(spec.waypoints, dtype=float)
        starts, durations, p0s, p1s = [], [], [], []
        t = 0.0
        n_seg = len(wps) - 1
        for i in range(max(n_seg, 0)):
            a = wps[i]
            b = wps[i + 1]
            dpos = np.array([b[0] - a[0], b[1] - a[1], b[3] - a[3]])
            dyaw = angle_wrap(b[2] - a[2])
            # peak min-jerk speed is 1.875x the mean
            T = max(1.875 * np.linalg.norm(dpos) / spec.speed,
                    1.875 * abs(dyaw) / spec.yaw_rate, spec.min_segment_time)
            if spec.hold > 0:
                starts.append(t)
                durations.append(spec.hold)
                p0s.append((a[0], a[1], a[3], a[2]))
                p1s.append((a[0], a[1], a[3], a[2]))
                t += spec.hold
            starts.append(t)
            durations.append(T)
            p0s.append((a[0], a[1], a[3], a[2]))
            p1s.append((b[0], b[1], b[3], a[2] + dyaw))
            t += T
        self.starts = np.asarray(starts)
        self.durations = np.asarray(durations)
        self.p0 = np.asarray(p0s).reshape(-1, 4)
        self.p1 = np.asarray(p1s).reshape(-1, 4)
        self.period = t
        self.final = np.array([wps[-1][0], wps[-1][1], wps[-1][3], wps[-1][2]])

    def _segment_state(self, t):
        """(x, y, z, yaw) and first two derivatives at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.period <= 0 or len(self.starts) == 0:
            p = np.tile(self.final, (len(t), 1))
            return p, np.zeros_like(p), np.zeros_like(p)
        if self.spec.loop:
            tl = np.mod(t, self.period)
            laps = np.floor(t / self.period)
        else:
            tl = np.minimum(t, self.period)
            laps = np.zeros_like(t)
        seg = np.clip(np.searchsorted(self.starts, tl, side="right") - 1, 0, len(self.starts) - 1)
        T = self.durations[seg]
        tau = (tl - self.starts[seg]) / T
        s, ds, dds = _min_jerk(tau)
        delta = self.p1[seg] - self.p0[seg]
        p = self.p0[seg] + delta * s[:, None]
        v = delta * (ds / T)[:, None]
        a = delta * (dds / (T * T))[:, None]
        if self.spec.loop:
            # yaw keeps accumulating lap over lap if the loop does not close in heading
            lap_yaw = self.p1[-1, 3] - self.p0[0, 3]
            p[:, 3] += laps * lap_yaw
        return p, v, a

    def sample(self, t):
        p, v, a = self._segment_state(t)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        amp = self.spec.attitude_amplitude
        w = 2 * math.pi * self.spec.attitude_frequency
        roll = amp * np.sin(w * t)
        pitch = amp * np.sin(w * t + 1.3)
        return {
            "pos": p[:, :3], "vel": v[:, :3], "acc": a[:, :3],
            "yaw": angle_wrap(p[:, 3]), "yaw_rate": v[:, 3],
            "roll": roll, "pitch": pitch,
        }


@dataclass
class SensorSpec:
    imu_rate: float = 30.0
    ir_rate: float = 30.0
    cam_rate: float = 5.0
    truth_rate: float = 120.0
    imu_accel_noise: float = 0.05
    ir_noise: float = 0.02
    cam_fov: tuple = DEFAULT_FOV
    features_per_frame: int = 180
    descriptor_bit_flip_prob: float = 0.05
    delta_noise: MotionNoise = MotionNoise(0.001, 0.001, 0.002)
    offset_noise: float = 0.002
    saliency_jitter: float = 0.0

    def __post_init__(self):
        self.delta_noise = MotionNoise(*self.delta_noise)
        self.cam_fov = tuple(self.cam_fov)
        for name in ("imu_rate", "ir_rate", "cam_rate", "truth_rate"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0 <= self.descriptor_bit_flip_prob < 1:
            raise InvalidArgumentError("bit flip probability must be in [0, 1)")
        if self.features_per_frame < 1:
            raise InvalidArgumentError("features_per_frame must be >= 1")

    @classmethod
    def noiseless(cls, **kw):
        base = dict(imu_accel_noise=0.0, ir_noise=0.0, descriptor_bit_flip_prob=0.0,
                    delta_noise=MotionNoise(0.0, 0.0, 0.0), offset_noise=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class ImuRecord:
    t: float
    accel: tuple
    attitude: tuple  # roll, pitch, yaw


@dataclass
class RangeRecord:
    t: float
    r: float


@dataclass
class FrameRecord:
    t: float
    frame: FeatureFrame
    delta: MotionDelta


@dataclass
class TruthRecord:
    t: float
    pose: Pose2D
    height: float


Record = Union[ImuRecord, RangeRecord, FrameRecord, TruthRecord]
_ORDER = {TruthRecord: 0, ImuRecord: 1, RangeRecord: 2, FrameRecord: 3}


@dataclass
class FlightLog:
    records: List[Record] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def sorted(self) -> "FlightLog":
        return FlightLog(sorted(self.records, key=lambda r: (r.t, _ORDER[type(r)])))

    def of_type(self, kind) -> list:
        return [r for r in self.records if isinstance(r, kind)]

    @property
    def frames(self):
        return self.of_type(FrameRecord)

    @property
    def truth(self):
        return self.of_type(TruthRecord)

    def truth_arrays(self):
        tr = self.truth
        t = np.array([r.t for r in tr])
        pose = np.array([r.pose for r in tr], dtype=float).reshape(-1, 3)
        h = np.array([r.height for r in tr])
        return t, pose, h


def compute_frame_delta(true_pose_prev, true_pose_cur, noise: MotionNoise = MotionNoise(),
                        rng: Optional[np.random.Generator] = None) -> MotionDelta:
    """Body-frame transform from the previous pose to the current one, plus noise."""
    x0, y0, th0 = map(float, true_pose_prev)
    x1, y1, th1 = map(float, true_pose_cur)
    c, s = math.cos(th0), math.sin(th0)
    dx, dy = x1 - x0, y1 - y0
    d = np.array([c * dx + s * dy, -s * dx + c * dy, angle_wrap(th1 - th0)])
    if rng is not None and any(noise):
        d = d + rng.standard_normal(3) * np.asarray(noise, dtype=float)
    return MotionDelta(*map(float, d))


def visible_features(world: World, xy, height: float, fov, cap: Optional[int] = None,
                     jitter: float = 0.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Indices of features inside the inscribed footprint circle, most salient
    first, truncated to ``cap``. ``jitter`` perturbs saliency per call."""
    r = perceptual_range(height, fov)
    idx = world.feature_map().query_radius(xy, r)
    if cap is not None and len(idx) > cap:
        score = world.saliency[idx]
        if jitter > 0 and rng is not None:
            score = score + rng.standard_normal(len(idx)) * jitter
        order = np.argsort(-score, kind="stable")
        idx = np.sort(idx[order[:cap]])
    return idx


def _times(rate, duration):
    n = int(math.floor(duration * rate + 1e-9)) + 1
    return np.arange(n) / rate


def simulate_flight(world: World, traj: TrajectorySpec, sensors: SensorSpec,
                    duration: float, seed: int = 0) -> FlightLog:
    if not duration > 0:
        raise InvalidArgumentError("duration must be positive")
    tr = Trajectory(traj)
    ss = np.random.SeedSequence(seed)
    rng_imu, rng_ir, rng_cam, rng_delta = (np.random.default_rng(s) for s in ss.spawn(4))
    records: list = []

    tt = _times(sensors.truth_rate, duration)
    st = tr.sample(tt)
    w, h = world.bounds
    pos = st["pos"]
    if (pos[:, 0].min() < 0 or pos[:, 0].max() > w or pos[:, 1].min() < 0
            or pos[:, 1].max() > h or pos[:, 2].min() <= 0):
        raise InvalidArgumentError("trajectory leaves the world bounds")
    for i, t in enumerate(tt):
        records.append(TruthRecord(float(t), Pose2D(float(pos[i, 0]), float(pos[i, 1]),
                                                    float(st["yaw"][i])), float(pos[i, 2])))

    ti = _times(sensors.imu_rate, duration)
    si = tr.sample(ti)
    R = rotation_matrix_zyx(si["roll"], si["pitch"], si["yaw"])
    body = np.einsum("kji,kj->ki", R, si["acc"])
    if sensors.imu_accel_noise > 0:
        body = body + rng_imu.standard_normal(body.shape) * sensors.imu_accel_noise
    for k, t in enumerate(ti):
        records.append(ImuRecord(float(t), tuple(map(float, body[k])),
                                 (float(si["roll"][k]), float(si["pitch"][k]), float(si["yaw"][k]))))

    tri = _times(sensors.ir_rate, duration)
    sr = tr.sample(tri)
    slant = sr["pos"][:, 2] / (np.cos(sr["roll"]) * np.cos(sr["pitch"]))
    if sensors.ir_noise > 0:
        slant = slant + rng_ir.standard_normal(len(slant)) * sensors.ir_noise
    for k, t in enumerate(tri):
        records.append(RangeRecord(float(t), float(slant[k])))

    tc = _times(sensors.cam_rate, duration)
    sc = tr.sample(tc)
    prev = None
    for k, t in enumerate(tc):
        x, y, z = sc["pos"][k]
        yaw = float(sc["yaw"][k])
        cur = (float(x), float(y), yaw)
        idx = visible_features(world, (x, y), z, sensors.cam_fov, sensors.features_per_frame,
                               sensors.saliency_jitter, rng_cam)
        c, s = math.cos(yaw), math.sin(yaw)
        rel = world.positions[idx] - np.array([x, y])
        offs = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]])
        if sensors.offset_noise > 0:
            offs = offs + rng_cam.standard_normal(offs.shape) * sensors.offset_noise
        desc = flip_bits(world.descriptors[idx], sensors.descriptor_bit_flip_prob, rng_cam)
        height = z / (math.cos(sc["roll"][k]) * math.cos(sc["pitch"][k]))
        if sensors.ir_noise > 0:
            height += float(rng_cam.standard_normal()) * sensors.ir_noise
        frame = FeatureFrame(float(t), float(height), offs, desc)
        if prev is None:
            delta = MotionDelta(0.0, 0.0, 0.0)
        else:
            delta = compute_frame_delta(prev, cur, sensors.delta_noise, rng_delta)
        records.append(FrameRecord(float(t), frame, delta))
        prev = cur

    return FlightLog(records).sorted()
