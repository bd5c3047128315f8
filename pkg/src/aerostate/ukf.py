"""Altitude (2-state) and 3D-plus-yaw (7-state) unscented Kalman filters.

IMU accelerations drive the prediction as control inputs; the IR range and
camera-derived quantities are measurements. Roll and pitch are side-channel
inputs supplied by the IMU's own attitude filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .estcore import (
    EulerAttitude,
    GaussianVec,
    InvalidArgumentError,
    NumericalDegeneracyError,
    angle_wrap,
    quat_from_euler,
    quat_rotate,
    residuals,
    rotation_matrix_zyx,
    sigma_points,
    unscented_transform,
)

PSI = 6  # yaw index in the 7-state vector
MEAS7_FIELDS = ("r", "x", "y", "x_dot", "y_dot", "psi_camera")


class State2(NamedTuple):
    z: float
    z_dot: float


class State7(NamedTuple):
    x: float
    y: float
    z: float
    x_dot: float
    y_dot: float
    z_dot: float
    psi: float


class Control2(NamedTuple):
    z_ddot: float


class Control7Body(NamedTuple):
    x_ddot_b: float
    y_ddot_b: float
    z_ddot_b: float


class Measurement2(NamedTuple):
    r: float


class Measurement7(NamedTuple):
    """Any field may be None (or NaN) when that sensor did not report."""

    r: Optional[float] = None
    x: Optional[float] = None
    y: Optional[float] = None
    x_dot: Optional[float] = None
    y_dot: Optional[float] = None
    psi_camera: Optional[float] = None


@dataclass
class UkfConfig:
    Q: np.ndarray
    R: np.ndarray
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise InvalidArgumentError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise InvalidArgumentError(f"{name} must be positive semi-definite")

    @classmethod
    def default2(cls, sigma_r: float = 0.02, accel_sigma: float = 0.5):
        """Altitude filter defaults from the IR and IMU noise specs.

        Q is a per-second intensity for white acceleration noise.
        """
        q = accel_sigma ** 2
        Q = q * np.array([[1e-4, 0.0], [0.0, 1e-2]])
        return cls(Q=Q, R=[[sigma_r ** 2]])

    @classmethod
    def default7(cls, sigma_r: float = 0.02, sigma_xy: float = 0.05,
                 sigma_v: float = 0.1, sigma_psi: float = 0.05, accel_sigma: float = 0.5):
        q = accel_sigma ** 2
        Q = np.diag([1e-4 * q] * 3 + [1e-2 * q] * 3 + [1e-3])
        R = np.diag([sigma_r ** 2, sigma_xy ** 2, sigma_xy ** 2,
                     sigma_v ** 2, sigma_v ** 2, sigma_psi ** 2])
        return cls(Q=Q, R=R)


def _check_dt(dt):
    if not dt > 0:
        raise InvalidArgumentError(f"time step must be positive, got {dt!r}")


def g2(prev, u, dt: float) -> np.ndarray:
    """Constant-acceleration step of (z, z_dot). Vectorized over leading axes."""
    _check_dt(dt)
    x = np.asarray(prev, dtype=float)
    a = float(np.asarray(u, dtype=float).reshape(-1)[0])
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] + x[..., 1] * dt + 0.5 * a * dt * dt
    out[..., 1] = x[..., 1] + a * dt
    return out


def h2(state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    return x[..., :1].copy()


def control_body_to_global(u, attitude: EulerAttitude, psi_state: float) -> np.ndarray:
    """Rotate body-frame accelerations to the global frame.

    Roll and pitch come from ``attitude``; yaw comes from the filter state.
    """
    q = quat_from_euler(EulerAttitude(attitude.roll, attitude.pitch, psi_state))
    return quat_rotate(q, u)


def g7(prev, u_global, dt: float) -> np.ndarray:
    """Constant-acceleration step in x, y, z; yaw carried through unchanged."""
    _check_dt(dt)
    x = np.asarray(prev, dtype=float)
    a = np.asarray(u_global, dtype=float)
    out = x.copy()
    out[..., 0:3] = x[..., 0:3] + x[..., 3:6] * dt + 0.5 * a * dt * dt
    out[..., 3:6] = x[..., 3:6] + a * dt
    return out


def _slant_divisor(attitude: EulerAttitude) -> float:
    c = math.cos(attitude.pitch) * math.cos(attitude.roll)
    if c <= 1e-6:
        raise InvalidArgumentError("attitude too close to vertical for a slant-range model")
    return c


def h7(state, attitude: EulerAttitude) -> np.ndarray:
    """Predicted (r, x, y, x_dot, y_dot, psi) for a 7-state (or stack of them)."""
    c = _slant_divisor(attitude)
    x = np.asarray(state, dtype=float)
    out = np.empty(x.shape[:-1] + (6,))
    out[..., 0] = x[..., 2] / c
    out[..., 1:5] = x[..., [0, 1, 3, 4]]
    out[..., 5] = x[..., PSI]
    return out


def _model_dim(estimate: GaussianVec) -> int:
    if estimate.dim not in (2, 7):
        raise InvalidArgumentError(f"estimate must be 2- or 7-dimensional, got {estimate.dim}")
    return estimate.dim


def ukf_predict(estimate: GaussianVec, u, dt: float, config: UkfConfig,
                attitude: Optional[EulerAttitude] = None) -> GaussianVec:
    """Prediction step. ``u`` is a vertical acceleration (2-state) or body-frame
    accelerations plus ``attitude`` (7-state). Q is integrated over ``dt``."""
    _check_dt(dt)
    n = _model_dim(estimate)
    if config.Q.shape != (n, n):
        raise InvalidArgumentError(f"Q must be {n}x{n}")
    angles = (PSI,) if n == 7 else ()
    sp = sigma_points(estimate, config.alpha, config.beta, config.kappa, angles)
    if n == 2:
        moved = g2(sp.points, u, dt)
    else:
        att = attitude if attitude is not None else EulerAttitude()
        ub = np.asarray(u, dtype=float)
        # each sigma point rotates the control by its own yaw
        R = rotation_matrix_zyx(att.roll, att.pitch, sp.points[:, PSI])
        a = np.einsum("kij,j->ki", R, ub)
        moved = g7(sp.points, a, dt)
        moved[:, PSI] = angle_wrap(moved[:, PSI])
    out = unscented_transform(sp.transformed(moved, angles), config.Q * dt)
    if n == 7:
        out.mean[PSI] = angle_wrap(out.mean[PSI])
    return out


def _measurement_vector(z, n):
    if n == 2:
        arr = np.atleast_1d(np.asarray(z, dtype=float)).reshape(-1)
        if arr.shape != (1,):
            raise InvalidArgumentError("altitude filter takes a single range reading")
        return arr
    vals = [np.nan if v is None else v for v in (z if not isinstance(z, dict)
                                                  else [z.get(k) for k in MEAS7_FIELDS])]
    arr = np.asarray(vals, dtype=float).reshape(-1)
    if arr.shape != (6,):
        raise InvalidArgumentError("7-state filter takes (r, x, y, x_dot, y_dot, psi_camera)")
    return arr


def ukf_update(estimate: GaussianVec, z, config: UkfConfig,
               attitude: Optional[EulerAttitude] = None) -> GaussianVec:
    """Measurement update. Missing 7-state components (None/NaN) are dropped
    from the measurement function and from R before the update."""
    n = _model_dim(estimate)
    zvec = _measurement_vector(z, n)
    rows = np.flatnonzero(np.isfinite(zvec))
    if rows.size == 0:
        return GaussianVec(estimate.mean.copy(), estimate.cov.copy())
    R = config.R[np.ix_(rows, rows)]
    state_angles = (PSI,) if n == 7 else ()
    sp = sigma_points(estimate, config.alpha, config.beta, config.kappa, state_angles)
    if n == 2:
        zs = h2(sp.points)
        meas_angles = ()
    else:
        zs = h7(sp.points, attitude if attitude is not None else EulerAttitude())[:, rows]
        meas_angles = tuple(int(i) for i in np.flatnonzero(rows == 5))
    zsp = sp.transformed(zs, meas_angles)
    pz = unscented_transform(zsp, R)
    dz = residuals(zs, pz.mean, meas_angles)
    dx = residuals(sp.points, estimate.mean, state_angles)
    Pxz = (dx * sp.cov_weights[:, None]).T @ dz
    try:
        S_inv = np.linalg.inv(pz.cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalDegeneracyError("innovation covariance is singular") from exc
    if not np.all(np.isfinite(S_inv)):
        raise NumericalDegeneracyError("innovation covariance is singular")
    K = Pxz @ S_inv
    innov = zvec[rows] - pz.mean
    for i in meas_angles:
        innov[i] = angle_wrap(innov[i])
    mean = estimate.mean + K @ innov
    cov = estimate.cov - K @ pz.cov @ K.T
    cov = 0.5 * (cov + cov.T)
    if n == 7:
        mean[PSI] = angle_wrap(mean[PSI])
    return GaussianVec(mean, cov)


def ema_filter(prev_smoothed: float, sample: float, alpha: float) -> float:
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError(f"EMA alpha must be in (0, 1], got {alpha!r}")
    return alpha * sample + (1.0 - alpha) * prev_smoothed


@dataclass
class UnscentedFilter:
    """Stateful wrapper: current estimate plus the time of the last predict.

    Single owner; do not share one instance across threads.
    """

    estimate: GaussianVec
    config: UkfConfig
    t: Optional[float] = None
    history: list = field(default_factory=list)

    def predict(self, t: float, u, attitude: Optional[EulerAttitude] = None):
        if self.t is not None and t > self.t:
            self.estimate = ukf_predict(self.estimate, u, t - self.t, self.config, attitude)
        self.t = t if self.t is None else max(self.t, t)
        return self.estimate

    def update(self, z, attitude: Optional[EulerAttitude] = None):
        self.estimate = ukf_update(self.estimate, z, self.config, attitude)
        return self.estimate



def track_altitude(records, config: Optional[UkfConfig] = None, z0: Optional[float] = None,
                   query_times=None):
    """Run the altitude filter over time-ordered IMU and range records.

    IMU records (``accel``, ``attitude``) predict with the global vertical
    acceleration; range records (``r``) update. Returns the filtered altitude
    at each of ``query_times`` (the estimate current at that instant), or the
    full (t, z, z_dot) history when ``query_times`` is None.
    """
    config = config or UkfConfig.default2()
    imu_or_range = [r for r in records if hasattr(r, "accel") or hasattr(r, "r")]
    imu_or_range.sort(key=lambda r: r.t)
    if not imu_or_range:
        raise InvalidArgumentError("no IMU or range records to filter")
    if z0 is None:
        first_r = next((r.r for r in imu_or_range if hasattr(r, "r")), 0.0)
        z0 = first_r
    filt = UnscentedFilter(GaussianVec([z0, 0.0], np.diag([0.05 ** 2, 0.1 ** 2])), config)
    a_z = 0.0
    hist_t, hist_z, hist_v = [], [], []
    for rec in imu_or_range:
        if filt.t is None:
            filt.t = rec.t
        if rec.t > filt.t:
            filt.predict(rec.t, [a_z])
        if hasattr(rec, "accel"):
            roll, pitch, yaw = rec.attitude
            R = rotation_matrix_zyx(roll, pitch, yaw)
            # zero-order hold until the next IMU sample
            a_z = float(R[2] @ np.asarray(rec.accel, dtype=float))
        else:
            filt.update([rec.r])
        hist_t.append(rec.t)
        hist_z.append(filt.estimate.mean[0])
        hist_v.append(filt.estimate.mean[1])
    hist_t = np.asarray(hist_t)
    hist_z = np.asarray(hist_z)
    if query_times is None:
        return hist_t, hist_z, np.asarray(hist_v)
    q = np.asarray(query_times, dtype=float)
    idx = np.searchsorted(hist_t, q, side="right") - 1
    return np.where(idx >= 0, hist_z[np.clip(idx, 0, None)], z0)
