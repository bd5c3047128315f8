"""Small numerical primitives shared by the filters.

Quaternions, Euler attitudes, Gaussian containers, scaled sigma points,
the unscented transform, a normal density and the low-variance resampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
LOG_SQRT_2PI = 0.5 * math.log(TWO_PI)


class EstimationError(Exception):
    """Base class for estimator failures."""


class InvalidArgumentError(EstimationError, ValueError):
    pass


class NumericalDegeneracyError(EstimationError, ArithmeticError):
    pass


class DegenerateWeightsError(EstimationError, ArithmeticError):
    pass


def angle_wrap(theta):
    """Wrap angle(s) into (-pi, pi]."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(theta, dtype=float), TWO_PI)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class EulerAttitude:
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "roll", angle_wrap(self.roll))
        object.__setattr__(self, "pitch", angle_wrap(self.pitch))
        object.__setattr__(self, "yaw", angle_wrap(self.yaw))
        if abs(self.roll) >= math.pi / 2 or abs(self.pitch) >= math.pi / 2:
            raise InvalidArgumentError(
                f"roll/pitch must stay below 90 deg, got ({self.roll}, {self.pitch})")


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if n == 0.0 or not math.isfinite(n):
            raise InvalidArgumentError("quaternion must have finite non-zero norm")
        object.__setattr__(self, "w", self.w / n)
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    @property
    def norm(self) -> float:
        return math.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        # Hamilton product; result renormalized by the constructor
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )


def _raw_product(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return (
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )


def quat_rotate(q: Quaternion, v) -> np.ndarray:
    """Rotate a 3-vector by ``q`` as the sandwich product q v q*."""
    if abs(q.norm - 1.0) > 1e-9:
        raise InvalidArgumentError(f"quaternion is not unit norm (|q| = {q.norm!r})")
    v = np.asarray(v, dtype=float)
    qv = _raw_product((q.w, q.x, q.y, q.z), (0.0, v[0], v[1], v[2]))
    out = _raw_product(qv, (q.w, -q.x, -q.y, -q.z))
    return np.array(out[1:])


def quat_from_euler(att: EulerAttitude) -> Quaternion:
    """Intrinsic Z-Y-X (yaw, then pitch, then roll) composition."""
    cr, sr = math.cos(att.roll / 2), math.sin(att.roll / 2)
    cp, sp = math.cos(att.pitch / 2), math.sin(att.pitch / 2)
    cy, sy = math.cos(att.yaw / 2), math.sin(att.yaw / 2)
    return Quaternion(
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    )


def euler_from_quat(q: Quaternion) -> EulerAttitude:
    w, x, y, z = q.w, q.x, q.y, q.z
    roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = math.asin(max(-1.0, min(1.0, 2 * (w * y - z * x))))
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return EulerAttitude(roll, pitch, yaw)


def rotation_matrix_zyx(roll, pitch, yaw):
    """Body-to-world rotation matrix(es) Rz(yaw) Ry(pitch) Rx(roll).

    Broadcasts over array inputs; the trailing two axes are the matrix.
    """
    roll, pitch, yaw = np.broadcast_arrays(
        np.asarray(roll, float), np.asarray(pitch, float), np.asarray(yaw, float))
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(roll.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def rot2(theta) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class GaussianVec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise InvalidArgumentError(
                f"covariance shape {self.cov.shape} does not match mean dimension {n}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def is_valid(self, tol: float = 1e-9) -> bool:
        if not np.allclose(self.cov, self.cov.T, atol=tol, rtol=0):
            return False
        return bool(np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T)).min() >= -tol)


@dataclass
class SigmaPointSet:
    points: np.ndarray  # (2n+1, n)
    mean_weights: np.ndarray
    cov_weights: np.ndarray
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0
    angle_indices: tuple = field(default=())

    def transformed(self, points, angle_indices=()) -> "SigmaPointSet":
        """Same weights, new point cloud (e.g. after pushing through a model)."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        return SigmaPointSet(points, self.mean_weights, self.cov_weights,
                             self.alpha, self.beta, self.kappa, tuple(angle_indices))


def merwe_weights(n: int, alpha: float, beta: float, kappa: float):
    lam = alpha ** 2 * (n + kappa) - n
    c = 0.5 / (n + lam)
    wm = np.full(2 * n + 1, c)
    wc = np.full(2 * n + 1, c)
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1.0 - alpha ** 2 + beta)
    return lam, wm, wc


def _cholesky_with_jitter(P: np.ndarray, retries: int = 3) -> np.ndarray:
    P = 0.5 * (P + P.T)
    n = P.shape[0]
    jitter = 1e-9 * max(np.trace(P), 0.0) / n
    for attempt in range(retries + 1):
        try:
            return np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            if attempt == retries or jitter == 0.0:
                break
            P = P + jitter * np.eye(n)
    raise NumericalDegeneracyError("covariance is not positive definite after jitter retries")


def sigma_points(g: GaussianVec, alpha: float = 0.1, beta: float = 2.0,
                 kappa: float = 0.0, angle_indices=()) -> SigmaPointSet:
    """Van der Merwe scaled sigma points for ``g``.

    Point 0 is the mean; points 1..n and n+1..2n are the mean plus and minus
    the columns of the lower Cholesky factor of (n + lambda) * cov.
    """
    n = g.dim
    lam, wm, wc = merwe_weights(n, alpha, beta, kappa)
    if n + lam <= 0:
        raise InvalidArgumentError("alpha/kappa give a non-positive sigma spread")
    L = _cholesky_with_jitter((n + lam) * g.cov)
    pts = np.empty((2 * n + 1, n))
    pts[0] = g.mean
    pts[1:n + 1] = g.mean + L.T
    pts[n + 1:] = g.mean - L.T
    return SigmaPointSet(pts, wm, wc, alpha, beta, kappa, tuple(angle_indices))


def weighted_mean(points: np.ndarray, weights: np.ndarray, angle_indices=()) -> np.ndarray:
    mean = weights @ points
    for i in angle_indices:
        mean[i] = math.atan2(weights @ np.sin(points[:, i]), weights @ np.cos(points[:, i]))
    return mean


def residuals(points: np.ndarray, mean: np.ndarray, angle_indices=()) -> np.ndarray:
    d = points - mean
    for i in angle_indices:
        d[:, i] = angle_wrap(d[:, i])
    return d


def unscented_transform(sp: SigmaPointSet, additive_noise=None) -> GaussianVec:
    """Weighted mean and covariance of a (transformed) sigma point cloud."""
    pts = sp.points
    mean = weighted_mean(pts, sp.mean_weights, sp.angle_indices)
    d = residuals(pts, mean, sp.angle_indices)
    cov = (d * sp.cov_weights[:, None]).T @ d
    if additive_noise is not None:
        cov = cov + np.atleast_2d(additive_noise)
    cov = 0.5 * (cov + cov.T)
    return GaussianVec(mean, cov)


def gaussian_prob(residual, sigma):
    """Zero-mean normal density of ``residual`` with standard deviation ``sigma``."""
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidArgumentError("sigma must be positive")
    r = np.asarray(residual, dtype=float) / sigma
    out = np.exp(-0.5 * r * r) / (math.sqrt(TWO_PI) * np.asarray(sigma, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def log_gaussian_prob(residual, sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidArgumentError("sigma must be positive")
    r = np.asarray(residual, dtype=float) / sigma
    out = -0.5 * r * r - np.log(sigma) - LOG_SQRT_2PI
    return float(out) if np.ndim(out) == 0 else out


def normalize_log_weights(log_weights) -> np.ndarray:
    """Return normalized linear weights; raises if none are finite."""
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if lw.size == 0 or not finite.any():
        raise DegenerateWeightsError("all log-weights are -inf or non-finite")
    m = lw[finite].max()
    w = np.where(finite, np.exp(lw - m), 0.0)
    return w / w.sum()


def systematic_resample(log_weights, n_out: int, rng: np.random.Generator) -> np.ndarray:
    """Low-variance (systematic) resampling.

    One uniform offset in [0, 1/n_out) and n_out evenly spaced pointers
    walked along the cumulative normalized weights.
    """
    w = normalize_log_weights(log_weights)
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    positions = (rng.random() + np.arange(n_out)) / n_out
    return np.searchsorted(cumulative, positions, side="right").astype(np.intp)
