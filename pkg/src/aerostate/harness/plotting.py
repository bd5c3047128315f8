"""Static figures for run reports (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings in the files
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path.name


def _truth_xy(log):
    t, pose, _ = log.truth_arrays()
    return t, pose


def plot_altitude(trace, path):
    t, truth, raw, z, ema = trace.T
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(t, raw, ".", ms=2, color="0.6", label="IR range")
    ax.plot(t, ema, lw=1, label="EMA (0.2)")
    ax.plot(t, z, lw=1.2, label="UKF")
    ax.plot(t, truth, "k--", lw=1, label="truth")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("altitude [m]")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_xy(est, log, path, fmap=None, title=""):
    _, pose = _truth_xy(log)
    fig, ax = plt.subplots(figsize=(6, 6))
    if fmap is not None and len(fmap):
        ax.scatter(fmap.positions[:, 0], fmap.positions[:, 1], s=0.3, color="0.8", lw=0)
    ax.plot(pose[:, 0], pose[:, 1], "k-", lw=1, label="truth")
    ax.plot(est[:, 1], est[:, 2], "-", lw=1, color="tab:red", label="estimate")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_error(est, log, path):
    tt, pose = _truth_xy(log)
    k = np.clip(np.searchsorted(tt, est[:, 0]), 0, len(tt) - 1)
    err = np.abs(est[:, 1] - pose[k, 0]) + np.abs(est[:, 2] - pose[k, 1])
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(est[:, 0], err, lw=1)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("L1 error [m]")
    return _save(fig, path)


def render(art, fig_path) -> list:
    """Render every figure that applies to the run; returns file names."""
    names = []
    mode = art.report.mode
    if "altitude" in art.traces:
        names.append(plot_altitude(art.traces["altitude"], fig_path("altitude")))
    if "slam_pose" in art.traces:
        log = art.logs["primary"]
        names.append(plot_xy(art.traces["slam_pose"], log, fig_path("slam_xy"), art.feature_map,
                             "SLAM trajectory and map"))
        names.append(plot_error(art.traces["slam_pose"], log, fig_path("slam_error")))
    if "pose" in art.traces:
        log = art.logs.get("relocalize", art.logs["primary"])
        fmap = art.feature_map if mode != "ukf7" else None
        names.append(plot_xy(art.traces["pose"], log, fig_path("xy"), fmap, mode))
        names.append(plot_error(art.traces["pose"], log, fig_path("error")))
    return names
