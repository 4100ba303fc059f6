"""Pipeline configuration: one INI file plus ``key=value`` overrides.

Example file::

    [pipeline]
    partition_count = 20
    worker_count = 4
    mode = CACHED
    window_ms = 3600000
    write_latency_s = 0.002

    [workload]
    schema_preset = SIMPLE
    records_per_table = 2000
    seed = 7

Every field of :class:`PipelineConfig` may appear under ``[pipeline]`` and
every field of :class:`~ondemand_etl.workload.WorkloadSpec` under
``[workload]``.  Overrides use ``section.key=value`` or a bare key, which
is looked up in ``pipeline`` first, then ``workload``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..processor import Mode
from ..producer import TableConfig
from ..steelworks import model_for
from ..workload import WorkloadError, WorkloadSpec


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class PipelineConfig:
    partition_count: int = 20
    master_partitions: int = 1
    worker_count: int = 4
    window_ms: int = 3_600_000
    mode: Mode = Mode.CACHED
    persist_dir: str | None = None

    # stage costs emulating remote systems
    write_latency_s: float = 0.0
    query_latency_s: float = 0.002
    read_latency_s: float = 0.0
    write_batch: int = 500

    # run control
    preload: bool = False
    replay_chunk: int = 32
    replay_pause_s: float = 0.002
    poll_batch: int = 64
    sweep_interval_s: float = 0.05
    retry_cap: int = 1000
    quiescence_s: float = 2.0
    deadline_s: float = 300.0
    sample_interval_s: float = 0.25

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
        except ValueError:
            raise ConfigError(f"mode must be CACHED or LOOKBACK, got {self.mode!r}") from None
        checks = {
            "partition_count": self.partition_count >= 1,
            "master_partitions": self.master_partitions >= 1,
            "worker_count": self.worker_count >= 1,
            "window_ms": self.window_ms >= 1,
            "write_batch": self.write_batch >= 1,
            "replay_chunk": self.replay_chunk >= 1,
            "poll_batch": self.poll_batch >= 1,
            "retry_cap": self.retry_cap >= 1,
            "deadline_s": self.deadline_s > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"invalid value for {', '.join(bad)}")
        for name in ("write_latency_s", "query_latency_s", "read_latency_s", "replay_pause_s", "quiescence_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def table_configs(self, spec: WorkloadSpec) -> list[TableConfig]:
        configs = model_for(spec.schema_preset).table_configs(self.partition_count, self.master_partitions)
        validate_tables(configs)
        return configs

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def validate_tables(configs: Iterable[TableConfig]) -> None:
    from ..broker import Nature

    seen = set()
    for cfg in configs:
        if cfg.table in seen:
            raise ConfigError(f"table {cfg.table!r} configured twice")
        seen.add(cfg.table)
        if cfg.nature is Nature.OPERATIONAL and not cfg.business_key_column:
            raise ConfigError(f"operational table {cfg.table!r} has no business key")


def _coerce(value: str, default: Any, name: str) -> Any:
    if isinstance(default, bool):
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if default is None or isinstance(default, str) or hasattr(default, "value"):
        return None if value.strip().lower() in ("", "none") and default is None else value.strip()
    try:
        return type(default)(value)
    except ValueError:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}") from None


def _build(cls: type, values: Mapping[str, str], section: str) -> Any:
    known = {f.name: f.default for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown [{section}] keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, known[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (ConfigError, WorkloadError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(
    path: str | os.PathLike[str] | None = None, overrides: Iterable[str] = ()
) -> tuple[PipelineConfig, WorkloadSpec]:
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    sections: dict[str, dict[str, str]] = {"pipeline": {}, "workload": {}}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        sections[name].update(parser[name])
    pipeline_keys = {f.name for f in fields(PipelineConfig)}
    workload_keys = {f.name for f in fields(WorkloadSpec)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if section not in sections:
                raise ConfigError(f"unknown section in override {item!r}")
        elif key in pipeline_keys:
            section = "pipeline"
        elif key in workload_keys:
            section = "workload"
        else:
            raise ConfigError(f"unknown override key {key!r}")
        sections[section][key] = value
    return _build(PipelineConfig, sections["pipeline"], "pipeline"), _build(WorkloadSpec, sections["workload"], "workload")


def describe(cfg: PipelineConfig, spec: WorkloadSpec) -> dict[str, Any]:
    """Flat, JSON-friendly record of a configuration for result headers."""
    out: dict[str, Any] = {}
    for obj, prefix in ((cfg, "pipeline"), (spec, "workload")):
        for f in fields(obj):
            v = getattr(obj, f.name)
            out[f"{prefix}.{f.name}"] = v.value if hasattr(v, "value") else v
    return out
