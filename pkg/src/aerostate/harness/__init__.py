"""Log I/O, evaluation against ground truth, end-to-end runs and the CLI."""

from .evaluation import (
    DEFAULT_TOLERANCE,
    ErrorStats,
    PairedSample,
    Pairing,
    error_stats,
    l1_error,
    l1_errors,
    pair_by_timestamp,
    stats_from_errors,
)
from .logio import LogVersionError, MalformedLogError, read_log, read_trace_csv, write_log
from .pipeline import MODES, EvalReport, PipelineError, RunConfig, execute, run_pipeline

__all__ = [
    "DEFAULT_TOLERANCE", "ErrorStats", "PairedSample", "Pairing", "error_stats", "l1_error",
    "l1_errors", "pair_by_timestamp", "stats_from_errors", "LogVersionError", "MalformedLogError",
    "read_log", "read_trace_csv", "write_log", "MODES", "EvalReport", "PipelineError", "RunConfig",
    "execute", "run_pipeline",
]
