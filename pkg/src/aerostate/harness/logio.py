"""Flight logs as JSON Lines, one record per line, schema version 1."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..features import descriptor_to_hex, descriptors_from_hex
from ..mcl import FeatureFrame, MotionDelta, Pose2D
from ..sim import FlightLog, FrameRecord, ImuRecord, RangeRecord, TruthRecord

SCHEMA_VERSION = 1


class MalformedLogError(ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class LogVersionError(MalformedLogError):
    pass


def record_to_dict(rec) -> dict:
    if isinstance(rec, ImuRecord):
        return {"v": SCHEMA_VERSION, "type": "imu", "t": rec.t,
                "accel": [float(a) for a in rec.accel],
                "attitude": [float(a) for a in rec.attitude]}
    if isinstance(rec, RangeRecord):
        return {"v": SCHEMA_VERSION, "type": "range", "t": rec.t, "r": float(rec.r)}
    if isinstance(rec, TruthRecord):
        x, y, th = rec.pose
        return {"v": SCHEMA_VERSION, "type": "truth", "t": rec.t,
                "x": float(x), "y": float(y), "theta": float(th), "height": float(rec.height)}
    if isinstance(rec, FrameRecord):
        fr = rec.frame
        return {"v": SCHEMA_VERSION, "type": "frame", "t": rec.t, "height": float(fr.height),
                "delta": [float(d) for d in rec.delta],
                "offsets": fr.offsets.tolist(),
                "descriptors": [descriptor_to_hex(d) for d in fr.descriptors]}
    raise TypeError(f"not a log record: {rec!r}")


def _vec(obj, key, n):
    val = obj[key]
    if not isinstance(val, list) or len(val) != n:
        raise ValueError(f"'{key}' must be a list of {n} numbers")
    return tuple(float(v) for v in val)


def record_from_dict(obj: dict):
    kind = obj["type"]
    t = float(obj["t"])
    if kind == "imu":
        return ImuRecord(t, _vec(obj, "accel", 3), _vec(obj, "attitude", 3))
    if kind == "range":
        return RangeRecord(t, float(obj["r"]))
    if kind == "truth":
        return TruthRecord(t, Pose2D(float(obj["x"]), float(obj["y"]), float(obj["theta"])),
                           float(obj["height"]))
    if kind == "frame":
        offsets = np.asarray(obj["offsets"], dtype=float).reshape(-1, 2)
        desc = descriptors_from_hex(obj["descriptors"])
        frame = FeatureFrame(t, float(obj["height"]), offsets, desc)
        return FrameRecord(t, frame, MotionDelta(*_vec(obj, "delta", 3)))
    raise KeyError(kind)


def dumps_record(rec) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"))


def write_log(log: FlightLog, path) -> None:
    with open(path, "w") as fh:
        for rec in log.records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def read_log(path) -> FlightLog:
    """Parse a JSONL flight log; errors carry the 1-based line number."""
    records = []
    last_t = -np.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLogError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise MalformedLogError("record is not an object", lineno)
            if obj.get("v") != SCHEMA_VERSION:
                raise LogVersionError(
                    f"unsupported schema version {obj.get('v')!r} (expected {SCHEMA_VERSION})", lineno)
            try:
                rec = record_from_dict(obj)
            except KeyError as exc:
                if "type" in obj and exc.args and exc.args[0] == obj["type"]:
                    raise MalformedLogError(f"unknown record type {obj['type']!r}", lineno) from None
                raise MalformedLogError(f"missing field {exc}", lineno) from None
            except (TypeError, ValueError) as exc:
                raise MalformedLogError(str(exc), lineno) from None
            if rec.t < last_t:
                raise MalformedLogError("timestamps must be non-decreasing", lineno)
            last_t = rec.t
            records.append(rec)
    return FlightLog(records)


def logs_equal(a: FlightLog, b: FlightLog) -> bool:
    """Structural equality, comparing arrays element-wise."""
    if len(a) != len(b):
        return False
    return all(dumps_record(x) == dumps_record(y) for x, y in zip(a.records, b.records))


def read_trace_csv(path):
    """Read an estimate trace (timestamp, x, y[, theta, ...]) into arrays."""
    import csv

    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "x", "y"} <= set(reader.fieldnames):
            raise MalformedLogError(f"{path}: trace needs timestamp, x, y columns")
        t, xy, th = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                t.append(float(row["timestamp"]))
                xy.append((float(row["x"]), float(row["y"])))
                th.append(float(row.get("theta") or 0.0))
            except (TypeError, ValueError):
                raise MalformedLogError("non-numeric trace value", lineno) from None
    poses = np.column_stack([np.asarray(xy, float).reshape(-1, 2), np.asarray(th, float)])
    return np.asarray(t, float), poses
