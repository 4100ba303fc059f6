"""Experiment harness: configuration, pipeline runs, benchmarks and the CLI."""

from .bench import DiffReport, Insertion, bench_scalability, bench_tailer, fault_inject, measure, verify, verify_run
from .config import ConfigError, PipelineConfig, load_config
from .metrics import RunMetrics
from .pipeline import Kill, RunResult, RunTimeout, StageError, run

__all__ = [
    "ConfigError", "DiffReport", "Insertion", "Kill", "PipelineConfig", "RunMetrics", "RunResult", "RunTimeout",
    "StageError", "bench_scalability", "bench_tailer", "fault_inject", "load_config", "measure", "run", "verify",
    "verify_run",
]
