"""Command-line entry point: ``aerostate simulate | run | eval``.

Exit codes: 0 success, 2 configuration error, 3 malformed input.
"""

from __future__ import annotations

import argparse
import json
import sys

from .. import sim
from ..estcore import InvalidArgumentError
from .evaluation import DEFAULT_TOLERANCE, format_table, l1_errors, pair_by_timestamp, stats_from_errors
from .logio import MalformedLogError, read_log, read_trace_csv
from .pipeline import MODES, PipelineError, RunConfig, execute, simulate_to_file, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MALFORMED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aerostate", description="Quadrotor state estimation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a flight log over a generated world")
    s.add_argument("--world-seed", type=int, default=0)
    s.add_argument("--seed", type=int, default=0, help="sensor noise seed")
    s.add_argument("--traj", default="square", choices=sorted(sim.TRAJECTORIES))
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--cam-rate", type=float, default=None)
    s.add_argument("--features", type=int, default=None, help="features per frame cap")
    s.add_argument("--out", required=True, help="output JSONL log")
    s.add_argument("--map-out", help="also write the ground-truth feature map")

    r = sub.add_parser("run", help="run an estimator and evaluate it")
    r.add_argument("--mode", required=True, choices=MODES)
    r.add_argument("--log", help="input JSONL log (simulated when omitted)")
    r.add_argument("--second-log", help="relocalization log for mcl-over-slam-map")
    r.add_argument("--map", help="map to localize against (mcl) or to write (SLAM modes)")
    r.add_argument("--particles", type=int, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--world-seed", type=int, default=0)
    r.add_argument("--traj", default=None, choices=sorted(sim.TRAJECTORIES))
    r.add_argument("--duration", type=float, default=None)
    r.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    r.add_argument("--report", help="report JSON path; table, trace CSV and figures go alongside")
    r.add_argument("--no-figures", action="store_true")

    e = sub.add_parser("eval", help="score an estimate trace against a log's truth")
    e.add_argument("--est", required=True, help="CSV with timestamp,x,y columns")
    e.add_argument("--truth", required=True, help="JSONL log with truth records")
    e.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    e.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return p


def _cmd_simulate(a) -> int:
    kw = {}
    if a.cam_rate is not None:
        kw["cam_rate"] = a.cam_rate
    if a.features is not None:
        kw["features_per_frame"] = a.features
    log = simulate_to_file(a.out, a.world_seed, a.traj, a.duration, a.seed,
                           sim.SensorSpec(**kw), a.map_out)
    print(f"wrote {len(log)} records to {a.out}")
    return EXIT_OK


def _cmd_run(a) -> int:
    slam_mode = a.mode in ("slam-offline", "mcl-over-slam-map")
    cfg = RunConfig(
        mode=a.mode, seed=a.seed, world_seed=a.world_seed, trajectory=a.traj,
        duration=a.duration, particles=a.particles, log_path=a.log,
        second_log_path=a.second_log, map_path=None if slam_mode else a.map, tolerance=a.tol,
    )
    art = execute(cfg)
    rep = art.report
    if a.report:
        rep = write_outputs(art, a.report, map_out=a.map if slam_mode else None,
                            figures=not a.no_figures)
    elif slam_mode and a.map:
        art.feature_map.save(a.map)
    sys.stdout.write(rep.table())
    return EXIT_OK


def _cmd_eval(a) -> int:
    t, poses = read_trace_csv(a.est)
    log = read_log(a.truth)
    tt, tp, _ = log.truth_arrays()
    pairing = pair_by_timestamp((t, poses), (tt, tp), a.tol)
    if not pairing.samples:
        raise InvalidArgumentError("no estimate paired with truth within tolerance")
    st = stats_from_errors(l1_errors(pairing.samples))
    if a.json:
        print(json.dumps({"stats": st.as_dict(), "paired": len(pairing.samples),
                          "dropped": pairing.dropped}, indent=2, sort_keys=True))
    else:
        print(format_table([("estimate", st)]))
        print(f"paired: {len(pairing.samples)}  dropped: {pairing.dropped}")
    return EXIT_OK


_COMMANDS = {"simulate": _cmd_simulate, "run": _cmd_run, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MalformedLogError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"aerostate: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except FileNotFoundError as exc:
        print(f"aerostate: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except PipelineError as exc:
        cause = exc.__cause__
        if isinstance(cause, (MalformedLogError, json.JSONDecodeError)) or (
                isinstance(cause, InvalidArgumentError) and "malformed" in str(cause)):
            print(f"aerostate: malformed input: {exc}", file=sys.stderr)
            return EXIT_MALFORMED
        print(f"aerostate: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as exc:
        print(f"aerostate: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
