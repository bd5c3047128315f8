"""Timestamp pairing and L1 error statistics against ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from ..estcore import InvalidArgumentError
from ..mcl import Pose2D

TRUTH_RATE = 120.0
DEFAULT_TOLERANCE = 0.5 / TRUTH_RATE


class PairedSample(NamedTuple):
    t: float
    est: Pose2D
    truth: Pose2D


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    std: float
    max: float
    min: float
    n: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "max": self.max, "min": self.min, "n": self.n}


@dataclass
class Pairing:
    samples: List[PairedSample]
    dropped: int


def _as_series(series):
    t, poses = series
    t = np.asarray(t, dtype=float).reshape(-1)
    poses = np.asarray(poses, dtype=float).reshape(len(t), -1)
    if poses.shape[1] == 2:
        poses = np.column_stack([poses, np.zeros(len(t))])
    return t, poses


def pair_by_timestamp(est, truth, tol: float = DEFAULT_TOLERANCE) -> Pairing:
    """Pair each estimate with its nearest truth sample within ``tol`` seconds.

    ``est`` and ``truth`` are ``(times, poses)`` with poses shaped (n, 2) or
    (n, 3), both sorted by time. Ties go to the earlier truth sample.
    """
    if tol < 0:
        raise InvalidArgumentError("tolerance must be non-negative")
    te, pe = _as_series(est)
    tt, pt = _as_series(truth)
    if np.any(np.diff(te) < 0) or np.any(np.diff(tt) < 0):
        raise InvalidArgumentError("series must be time-sorted")
    if len(tt) == 0:
        return Pairing([], len(te))
    right = np.clip(np.searchsorted(tt, te, side="left"), 0, len(tt) - 1)
    left = np.clip(right - 1, 0, len(tt) - 1)
    d_left = np.abs(te - tt[left])
    d_right = np.abs(tt[right] - te)
    nearest = np.where(d_left <= d_right, left, right)
    dist = np.minimum(d_left, d_right)
    samples = []
    for i in np.flatnonzero(dist <= tol):
        j = nearest[i]
        samples.append(PairedSample(float(te[i]), Pose2D(*map(float, pe[i])), Pose2D(*map(float, pt[j]))))
    return Pairing(samples, int(len(te) - len(samples)))


def l1_error(s: PairedSample) -> float:
    return abs(s.est.x - s.truth.x) + abs(s.est.y - s.truth.y)


def l1_errors(samples: Sequence[PairedSample]) -> np.ndarray:
    if not samples:
        return np.zeros(0)
    e = np.array([s.est[:2] for s in samples], dtype=float)
    g = np.array([s.truth[:2] for s in samples], dtype=float)
    return np.abs(e - g).sum(axis=1)


def stats_from_errors(errors) -> ErrorStats:
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        raise InvalidArgumentError("no samples")
    std = float(np.std(e, ddof=1)) if e.size > 1 else 0.0
    mean = float(np.mean(e))
    # keep min <= mean <= max exact under rounding
    mean = min(max(mean, float(e.min())), float(e.max()))
    return ErrorStats(mean, std, float(e.max()), float(e.min()), int(e.size))


def error_stats(samples: Sequence[PairedSample]) -> ErrorStats:
    return stats_from_errors(l1_errors(samples))


def rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return math.sqrt(float(np.mean(x * x))) if x.size else float("nan")


def xcorr_lag(signal, reference, max_lag: int) -> int:
    """Lag in samples (positive = ``signal`` trails ``reference``) maximizing the
    cross-correlation of the mean-removed series."""
    s = np.asarray(signal, dtype=float)
    r = np.asarray(reference, dtype=float)
    s = s - s.mean()
    r = r - r.mean()
    n = len(s)
    best_lag, best = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            c = float(np.dot(s[lag:], r[:n - lag]))
        else:
            c = float(np.dot(s[:n + lag], r[-lag:]))
        if c > best:
            best_lag, best = lag, c
    return best_lag


def format_table(rows) -> str:
    """Fixed-width table: rows of (label, ErrorStats)."""
    head = f"{'Run':<28}{'Mean':>10}{'Std':>10}{'Maximum':>10}{'Minimum':>10}{'N':>7}"
    lines = [head, "-" * len(head)]
    for label, st in rows:
        lines.append(f"{label:<28}{st.mean:>10.4f}{st.std:>10.4f}{st.max:>10.4f}{st.min:>10.4f}{st.n:>7d}")
    return "\n".join(lines)
