"""End-to-end runs: simulate (or load) a log, run an estimator, evaluate.

Each mode writes a JSON report, a fixed-width text table, a CSV trace and
PNG figures next to the report path. Reports hold no wall-clock data, so a
fixed RunConfig always yields the same bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import fastslam, mcl, sim, ukf
from ..estcore import EstimationError, EulerAttitude, GaussianVec, InvalidArgumentError, angle_wrap
from ..features import FeatureMap
from ..mcl import FeatureFrame, MclConfig, Pose2D
from .evaluation import (
    DEFAULT_TOLERANCE,
    ErrorStats,
    format_table,
    pair_by_timestamp,
    rms,
    stats_from_errors,
    l1_errors,
    xcorr_lag,
)
from .logio import read_log, write_log

MODES = ("ukf2", "ukf7", "mcl", "slam-offline", "mcl-over-slam-map")

DEFAULT_TRAJECTORY = {
    "ukf2": "hover",
    "ukf7": "square",
    "mcl": "square",
    "slam-offline": "handheld",
    "mcl-over-slam-map": "handheld",
}
DEFAULT_PARTICLES = {"mcl": 40, "slam-offline": 40, "mcl-over-slam-map": 40}
# one full pass of the handheld sweep (about 86 s at 0.2 m/s)
DEFAULT_DURATION = {"slam-offline": 90.0, "mcl-over-slam-map": 90.0}
EMA_ALPHA = 0.2


class PipelineError(EstimationError):
    """A run failed; the message names the mode and stage."""


def default_sensors(mode: str) -> sim.SensorSpec:
    if mode in ("slam-offline", "mcl-over-slam-map"):
        return sim.SensorSpec(cam_rate=30.0, features_per_frame=200)
    return sim.SensorSpec()


@dataclass
class RunConfig:
    mode: str
    seed: int = 0
    world_seed: int = 0
    trajectory: Optional[str] = None
    duration: Optional[float] = None
    particles: Optional[int] = None
    relocalize_particles: int = 20
    relocalize_cam_rate: float = 14.0
    sensors: Optional[sim.SensorSpec] = None
    log_path: Optional[str] = None
    second_log_path: Optional[str] = None
    map_path: Optional[str] = None
    tolerance: float = DEFAULT_TOLERANCE
    init_spread: tuple = (0.02, 0.02, 0.02)
    filtered_heights: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.trajectory is None:
            self.trajectory = DEFAULT_TRAJECTORY[self.mode]
        if self.trajectory not in sim.TRAJECTORIES:
            raise InvalidArgumentError(f"unknown trajectory {self.trajectory!r}")
        if self.particles is None:
            self.particles = DEFAULT_PARTICLES.get(self.mode, 1)
        if self.particles < 1 or self.relocalize_particles < 1:
            raise InvalidArgumentError("particle counts must be >= 1")
        if self.duration is None:
            self.duration = DEFAULT_DURATION.get(self.mode, 60.0)
        if not self.duration > 0:
            raise InvalidArgumentError("duration must be positive")
        if self.sensors is None:
            self.sensors = default_sensors(self.mode)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["sensors"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["sensors"].items()}
        d["init_spread"] = list(self.init_spread)
        return d


@dataclass
class EvalReport:
    mode: str
    config: dict
    stats: Dict[str, ErrorStats] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        data = {
            "mode": self.mode,
            "config": self.config,
            "stats": {k: v.as_dict() for k, v in self.stats.items()},
            "metrics": self.metrics,
            "files": self.files,
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        parts = [f"mode: {self.mode}"]
        if self.stats:
            parts.append(format_table(self.stats.items()))
        for k in sorted(self.metrics):
            v = self.metrics[k]
            parts.append(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
        return "\n".join(parts) + "\n"


@dataclass
class RunArtifacts:
    """In-memory results kept alongside the report for callers and plots."""

    report: EvalReport
    traces: Dict[str, np.ndarray] = field(default_factory=dict)
    feature_map: Optional[FeatureMap] = None
    logs: Dict[str, sim.FlightLog] = field(default_factory=dict)


def _seeds(seed: int):
    # independent streams: primary log, estimator, second log, second estimator
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(4)]


def _simulate(cfg: RunConfig, world: sim.World, sensors: sim.SensorSpec, seed: int) -> sim.FlightLog:
    traj = sim.TRAJECTORIES[cfg.trajectory](world.bounds)
    return sim.simulate_flight(world, traj, sensors, cfg.duration, seed)


def with_filtered_heights(log: sim.FlightLog) -> sim.FlightLog:
    """Copy of ``log`` whose frame heights come from the altitude UKF.

    Logs without range records are returned unchanged.
    """
    if not any(isinstance(r, sim.RangeRecord) for r in log.records):
        return log
    frames = log.frames
    if not frames:
        return log
    z = ukf.track_altitude(log.records, query_times=[f.t for f in frames])
    heights = {id(f): float(h) for f, h in zip(frames, z)}
    out = []
    for r in log.records:
        if isinstance(r, sim.FrameRecord):
            fr = r.frame
            out.append(sim.FrameRecord(r.t, FeatureFrame(fr.timestamp, heights[id(r)], fr.offsets,
                                                         fr.descriptors), r.delta))
        else:
            out.append(r)
    return sim.FlightLog(out)


def _truth_series(log: sim.FlightLog):
    t, pose, h = log.truth_arrays()
    if len(t) == 0:
        raise InvalidArgumentError("log has no truth records to evaluate against")
    return t, pose, h


def _pose_stats(est_t, est_pose, log, tol):
    tt, tp, _ = _truth_series(log)
    pairing = pair_by_timestamp((est_t, est_pose), (tt, tp), tol)
    if not pairing.samples:
        raise InvalidArgumentError("no estimate could be paired with truth")
    return stats_from_errors(l1_errors(pairing.samples)), pairing


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------- modes

def run_altitude(log: sim.FlightLog):
    """2-state UKF and the EMA baseline over a log's IMU and range streams."""
    ranges = log.of_type(sim.RangeRecord)
    if not ranges:
        raise InvalidArgumentError("log has no range records")
    tt, _, th = _truth_series(log)
    t_r = np.array([r.t for r in ranges])
    raw = np.array([r.r for r in ranges])
    z_ukf = ukf.track_altitude(log.records, query_times=t_r)
    ema = np.empty_like(raw)
    ema[0] = raw[0]
    for k in range(1, len(raw)):
        ema[k] = ukf.ema_filter(ema[k - 1], raw[k], EMA_ALPHA)
    truth = np.interp(t_r, tt, th)
    return t_r, truth, raw, z_ukf, ema


def _mode_ukf2(cfg, log, seeds, art):
    t, truth, raw, z, ema = run_altitude(log)
    max_lag = int(round(1.0 * cfg.sensors.ir_rate))
    err = np.abs(z - truth)
    rep = art.report
    rep.stats["UKF altitude |error|"] = stats_from_errors(err)
    rep.stats["IR altitude |error|"] = stats_from_errors(np.abs(raw - truth))
    rep.stats["EMA altitude |error|"] = stats_from_errors(np.abs(ema - truth))
    rep.metrics.update({
        "ukf_rms": rms(z - truth),
        "ir_rms": rms(raw - truth),
        "ema_rms": rms(ema - truth),
        "ukf_lag_samples": xcorr_lag(z, truth, max_lag),
        "ema_lag_samples": xcorr_lag(ema, truth, max_lag),
        "samples": int(len(t)),
    })
    rep.metrics["ukf_to_ir_rms_ratio"] = rep.metrics["ukf_rms"] / rep.metrics["ir_rms"]
    art.traces["altitude"] = np.column_stack([t, truth, raw, z, ema])


def run_ukf7(log: sim.FlightLog, start_pose=None, start_height=None):
    """7-state UKF: IMU predicts, IR range updates with the current attitude,
    frames contribute velocity and integrated-yaw measurements."""
    records = log.sorted().records
    truth = [r for r in records if isinstance(r, sim.TruthRecord)]
    if start_pose is None:
        start_pose = truth[0].pose if truth else Pose2D(0.0, 0.0, 0.0)
    if start_height is None:
        start_height = truth[0].height if truth else next(
            (r.r for r in records if isinstance(r, sim.RangeRecord)), 0.0)
    x0 = np.array([start_pose[0], start_pose[1], start_height, 0.0, 0.0, 0.0, start_pose[2]])
    P0 = np.diag([1e-4, 1e-4, 0.05 ** 2, 0.01, 0.01, 0.01, 1e-4])
    filt = ukf.UnscentedFilter(GaussianVec(x0, P0), ukf.UkfConfig.default7())
    u = np.zeros(3)
    att = EulerAttitude()
    psi_cam = float(start_pose[2])
    last_frame_t = None
    rows = []
    for rec in records:
        if isinstance(rec, sim.TruthRecord):
            continue
        if filt.t is None:
            filt.t = rec.t
        if rec.t > filt.t:
            filt.predict(rec.t, u, att)
        if isinstance(rec, sim.ImuRecord):
            roll, pitch, _ = rec.attitude
            att = EulerAttitude(roll, pitch, 0.0)
            u = np.asarray(rec.accel, dtype=float)
        elif isinstance(rec, sim.RangeRecord):
            filt.update(ukf.Measurement7(r=rec.r), att)
        elif isinstance(rec, sim.FrameRecord):
            d = rec.delta
            if last_frame_t is not None and rec.t > last_frame_t:
                dt = rec.t - last_frame_t
                c, s = math.cos(psi_cam), math.sin(psi_cam)
                vx = (c * d.dx - s * d.dy) / dt
                vy = (s * d.dx + c * d.dy) / dt
                psi_cam = float(angle_wrap(psi_cam + d.dtheta))
                filt.update(ukf.Measurement7(x_dot=vx, y_dot=vy, psi_camera=psi_cam), att)
            last_frame_t = rec.t
            m = filt.estimate.mean
            rows.append((rec.t, m[0], m[1], m[2], m[3], m[4], m[6]))
    return np.array(rows, dtype=float).reshape(-1, 7)


def _mode_ukf7(cfg, log, seeds, art):
    tr = run_ukf7(log)
    stats, pairing = _pose_stats(tr[:, 0], tr[:, [1, 2, 6]], log, cfg.tolerance)
    art.report.stats["UKF-7 xy"] = stats
    tt, _, th = _truth_series(log)
    art.report.metrics.update({
        "altitude_rms": rms(tr[:, 3] - np.interp(tr[:, 0], tt, th)),
        "paired": len(pairing.samples),
        "dropped": pairing.dropped,
    })
    art.traces["pose"] = tr[:, [0, 1, 2, 6]]


def run_mcl(log: sim.FlightLog, fmap: FeatureMap, n_particles: int, rng: np.random.Generator,
            cfg: Optional[MclConfig] = None, start_pose=None, spread=(0.02, 0.02, 0.02)):
    """Replay a log's frames through MCL; returns rows (t, x, y, theta)."""
    frames = log.frames
    if not frames:
        raise InvalidArgumentError("log contains no frames")
    if start_pose is None:
        truth = log.truth
        start_pose = truth[0].pose if truth else None
    if start_pose is None:
        ps = mcl.init_particles_uniform(fmap.bounds, n_particles, rng)
    else:
        ps = mcl.init_particles(start_pose, n_particles, spread, rng)
    loc = mcl.MonteCarloLocalizer(fmap, ps, cfg or MclConfig(), rng)
    rows = []
    for fr in frames:
        est = loc.step(fr.delta, fr.frame)
        rows.append((fr.t, est.x, est.y, est.theta))
    return np.array(rows, dtype=float).reshape(-1, 4), loc


def _mode_mcl(cfg, log, seeds, art, world):
    if cfg.map_path:
        fmap = FeatureMap.load(cfg.map_path)
    elif world is not None:
        fmap = world.feature_map()
    else:
        raise InvalidArgumentError("mcl on a recorded log needs --map")
    tr, loc = run_mcl(log, fmap, cfg.particles, np.random.default_rng(seeds[1]),
                      spread=cfg.init_spread)
    stats, pairing = _pose_stats(tr[:, 0], tr[:, 1:], log, cfg.tolerance)
    art.report.stats["MCL"] = stats
    art.report.metrics.update({
        "map_features": len(fmap), "updates": loc.n_updates, "reinitializations": loc.n_reinit,
        "paired": len(pairing.samples), "dropped": pairing.dropped,
        "duration_s": float(tr[-1, 0] - tr[0, 0]),
    })
    art.traces["pose"] = tr
    art.feature_map = fmap


def _slam(cfg, log, seeds, art):
    res = fastslam.offline_slam(log, fastslam.SlamConfig(), np.random.default_rng(seeds[1]),
                                cfg.particles)
    tr = np.array([(r.timestamp, r.x, r.y, r.theta) for r in res.trace], dtype=float).reshape(-1, 4)
    stats, pairing = _pose_stats(tr[:, 0], tr[:, 1:], log, cfg.tolerance)
    art.report.stats["SLAM trajectory"] = stats
    art.report.metrics.update({
        "landmarks": len(res.feature_map),
        "slam_paired": len(pairing.samples),
        "slam_dropped": pairing.dropped,
    })
    art.traces["slam_pose"] = tr
    art.traces["slam_rows"] = np.array([tuple(r) for r in res.trace], dtype=float).reshape(-1, 6)
    art.feature_map = res.feature_map
    return res


def _mode_slam(cfg, log, seeds, art, world):
    _slam(cfg, log, seeds, art)


def _mode_mcl_over_slam(cfg, log, seeds, art, world):
    res = _slam(cfg, log, seeds, art)
    if cfg.second_log_path:
        log2 = read_log(cfg.second_log_path)
    elif world is not None:
        sensors2 = replace(cfg.sensors, cam_rate=cfg.relocalize_cam_rate)
        log2 = _simulate(cfg, world, sensors2, seeds[2])
    else:
        raise InvalidArgumentError("mcl-over-slam-map on a recorded log needs a second log")
    if cfg.filtered_heights:
        log2 = with_filtered_heights(log2)
    art.logs["relocalize"] = log2
    tr, loc = run_mcl(log2, res.feature_map, cfg.relocalize_particles,
                      np.random.default_rng(seeds[3]), spread=cfg.init_spread)
    stats, pairing = _pose_stats(tr[:, 0], tr[:, 1:], log2, cfg.tolerance)
    art.report.stats["MCL over SLAM map"] = stats
    art.report.metrics.update({
        "paired": len(pairing.samples), "dropped": pairing.dropped,
        "updates": loc.n_updates, "reinitializations": loc.n_reinit,
    })
    art.traces["pose"] = tr


_RUNNERS = {
    "ukf2": lambda cfg, log, seeds, art, world: _mode_ukf2(cfg, log, seeds, art),
    "ukf7": lambda cfg, log, seeds, art, world: _mode_ukf7(cfg, log, seeds, art),
    "mcl": _mode_mcl,
    "slam-offline": _mode_slam,
    "mcl-over-slam-map": _mode_mcl_over_slam,
}


def execute(cfg: RunConfig) -> RunArtifacts:
    """Run the configured mode in memory without writing files."""
    seeds = _seeds(cfg.seed)
    world = None
    try:
        if cfg.log_path:
            log = read_log(cfg.log_path)
        else:
            world = sim.generate_world(seed=cfg.world_seed)
            log = _simulate(cfg, world, cfg.sensors, seeds[0])
        if cfg.filtered_heights and cfg.mode in ("mcl", "slam-offline", "mcl-over-slam-map"):
            log = with_filtered_heights(log)
        art = RunArtifacts(EvalReport(cfg.mode, cfg.as_dict()))
        art.logs["primary"] = log
        _RUNNERS[cfg.mode](cfg, log, seeds, art, world)
    except (EstimationError, ValueError) as exc:
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError(f"{cfg.mode}: {exc}") from exc
    return art


def _output_paths(report_path: Path) -> dict:
    stem = report_path.with_suffix("")
    return {
        "json": report_path,
        "table": stem.with_name(stem.name + "_table.txt"),
        "trace": stem.with_name(stem.name + "_trace.csv"),
        "map": stem.with_name(stem.name + "_map.json"),
        "fig": lambda name: stem.with_name(f"{stem.name}_{name}.png"),
    }


def write_outputs(art: RunArtifacts, report_path, map_out=None, figures: bool = True) -> EvalReport:
    """Write the report, table, trace CSV, exported map and figures."""
    from . import plotting

    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    paths = _output_paths(report_path)
    rep = art.report
    files = []
    if "altitude" in art.traces:
        _write_csv(paths["trace"], ["timestamp", "truth", "ir", "ukf", "ema"], art.traces["altitude"])
    elif "pose" in art.traces:
        _write_csv(paths["trace"], ["timestamp", "x", "y", "theta"], art.traces["pose"])
    elif "slam_rows" in art.traces:
        fastslam.write_pose_trace([fastslam.PoseTraceRow(*r[:4], int(r[4]), r[5])
                                   for r in art.traces["slam_rows"]], paths["trace"])
    files.append(paths["trace"].name)
    if "slam_rows" in art.traces and "pose" in art.traces:
        slam_trace = report_path.with_name(report_path.stem + "_slam_trace.csv")
        fastslam.write_pose_trace([fastslam.PoseTraceRow(*r[:4], int(r[4]), r[5])
                                   for r in art.traces["slam_rows"]], slam_trace)
        files.append(slam_trace.name)
    if art.feature_map is not None and rep.mode in ("slam-offline", "mcl-over-slam-map"):
        target = Path(map_out) if map_out else paths["map"]
        art.feature_map.save(target)
        files.append(target.name)
    if figures:
        for name in plotting.render(art, paths["fig"]):
            files.append(name)
    files.append(paths["table"].name)
    rep.files = sorted(files)
    paths["table"].write_text(rep.table())
    paths["json"].write_text(rep.to_json())
    return rep


def run_pipeline(cfg: RunConfig, report_path=None, map_out=None, figures: bool = True) -> EvalReport:
    """Run a mode end to end. With ``report_path`` all outputs are written
    next to it; otherwise only the in-memory report is returned."""
    art = execute(cfg)
    if report_path is not None:
        return write_outputs(art, report_path, map_out, figures)
    return art.report


def simulate_to_file(out, world_seed: int = 0, trajectory: str = "square", duration: float = 60.0,
                     seed: int = 0, sensors: Optional[sim.SensorSpec] = None, map_out=None):
    """Simulate a flight log (and optionally the ground-truth map) to disk."""
    if trajectory not in sim.TRAJECTORIES:
        raise InvalidArgumentError(f"unknown trajectory {trajectory!r}")
    world = sim.generate_world(seed=world_seed)
    traj = sim.TRAJECTORIES[trajectory](world.bounds)
    log = sim.simulate_flight(world, traj, sensors or sim.SensorSpec(), duration, seed)
    write_log(log, out)
    if map_out:
        world.feature_map().save(map_out)
    return log
