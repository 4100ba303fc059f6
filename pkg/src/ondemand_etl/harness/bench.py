"""Benchmarks, fault injection and dump verification.

Throughput benchmarks use preloaded runs: the whole log is published
before workers start, so the figure is operational records processed per
second of processor wall time, including cache bootstrap.
"""

from __future__ import annotations

import logging
import statistics
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..broker import Broker, Nature
from ..cdc_log import CdcLogWriter, LogTailer, Op
from ..producer import Pump, TableConfig, create_topics
from ..uploader import DUMP_FIELDS, FLOAT_FIELDS, parse_dump
from ..workload import DEFAULT_START_TS, WorkloadSpec, oracle
from .config import PipelineConfig, describe
from .metrics import write_csv
from .pipeline import Kill, RunResult, RunTimeout, StageError, run

log = logging.getLogger(__name__)

TOLERANCE = 1e-9


# -- verify ------------------------------------------------------------------


@dataclass
class DiffReport:
    differences: list[str] = field(default_factory=list)
    rows_a: int = 0
    rows_b: int = 0

    @property
    def ok(self) -> bool:
        return not self.differences

    def __str__(self) -> str:
        if self.ok:
            return f"dumps match ({self.rows_a} rows)"
        head = "\n".join(self.differences[:50])
        more = len(self.differences) - 50
        return head + (f"\n... and {more} more" if more > 0 else "")


def verify(dump_a: str, dump_b: str, tolerance: float = TOLERANCE) -> DiffReport:
    """Field-level comparison of two canonical dumps.

    Float fields may differ by ``tolerance`` (absolute); everything else
    must match exactly.  Raises ``DumpFormatError`` on malformed input.
    """
    a = {r["fact_id"]: r for r in parse_dump(dump_a)}
    b = {r["fact_id"]: r for r in parse_dump(dump_b)}
    report = DiffReport(rows_a=len(a), rows_b=len(b))
    for fid in sorted(a.keys() - b.keys()):
        report.differences.append(f"{fid}: only in first dump")
    for fid in sorted(b.keys() - a.keys()):
        report.differences.append(f"{fid}: only in second dump")
    for fid in sorted(a.keys() & b.keys()):
        ra, rb = a[fid], b[fid]
        for name in DUMP_FIELDS[1:]:
            va, vb = ra[name], rb[name]
            if name in FLOAT_FIELDS and va is not None and vb is not None:
                same = abs(va - vb) <= tolerance
            else:
                same = va == vb
            if not same:
                report.differences.append(f"{fid} {name}: {va!r} != {vb!r}")
    return report


def verify_run(result: RunResult, window_ms: int) -> DiffReport:
    expected = oracle(result.log_dir, result.manifest.preset, window_ms)
    return verify(result.dump, expected)


# -- processor throughput ------------------------------------------------------


def measure(
    cfg: PipelineConfig, spec: WorkloadSpec, work_dir: str | Path, repeats: int = 1
) -> tuple[float, list[RunResult]]:
    """Median preloaded throughput over ``repeats`` runs of the same workload."""
    cfg = cfg.replace(preload=True)
    results = [run(cfg, spec, Path(work_dir) / f"rep{i}") for i in range(repeats)]
    return statistics.median(r.metrics.throughput for r in results), results


def bench_scalability(
    cfg: PipelineConfig,
    spec: WorkloadSpec,
    workers: Sequence[int],
    work_dir: str | Path,
    repeats: int = 1,
    csv_path: str | Path | None = None,
) -> list[dict]:
    """One preloaded run (or median of ``repeats``) per worker count."""
    rows = []
    for n in workers:
        row: dict = {"workers": n, "partitions": cfg.partition_count}
        try:
            rate, results = measure(cfg.replace(worker_count=n), spec, Path(work_dir) / f"workers{n}", repeats)
            row.update(records_per_s=round(rate, 2), processing_s=round(results[0].metrics.processing_s, 4),
                       status="ok")
        except StageError as exc:
            log.warning("scalability run with %d workers failed: %s", n, exc)
            row.update(records_per_s="", processing_s="", status=f"error: {exc}")
        rows.append(row)
    if csv_path is not None:
        header = describe(cfg, spec) | {"bench": "scalability", "repeats": repeats}
        cols = ("workers", "partitions", "records_per_s", "processing_s", "status")
        write_csv(csv_path, header, cols, ([r[c] for c in cols] for r in rows))
    return rows


# -- tailer ------------------------------------------------------------------


class Insertion(str, Enum):
    GROWING = "GROWING"  # rows are inserted only into the extracted tables
    FIXED = "FIXED"  # rows are inserted into all tables, a subset is extracted


def _write_tables(directory: Path, tables: Sequence[str], records_per_table: int, seed: int) -> int:
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 1_000_000, size=(records_per_table, len(tables)))
    with CdcLogWriter(directory, {t: "id" for t in tables}) as writer:
        for i in range(records_per_table):
            for j, table in enumerate(tables):
                writer.write(table, Op.INSERT, DEFAULT_START_TS + i, {"id": i + 1, "value": int(values[i, j])})
    return records_per_table * len(tables)


def bench_tailer(
    table_counts: Sequence[int] = (1, 2, 4, 8, 16),
    mode: Insertion | str = Insertion.FIXED,
    work_dir: str | Path = "bench_tailer",
    records_per_table: int = 1000,
    total_tables: int = 16,
    read_latency_s: float = 0.001,
    chunk_lines: int = 64,
    seed: int = 0,
    csv_path: str | Path | None = None,
) -> list[dict]:
    """Extraction throughput of concurrent per-table tailers sharing one log.

    Each tailer scans the whole log and keeps its own table's rows, paying
    ``read_latency_s`` per ``chunk_lines`` lines read.
    """
    mode = Insertion(mode)
    if max(table_counts) > total_tables:
        raise ValueError("table count exceeds total_tables")
    work = Path(work_dir)
    names = [f"t{i:02d}" for i in range(1, total_tables + 1)]
    rows = []
    fixed_log: tuple[Path, int] | None = None
    for k in table_counts:
        extracted = names[:k]
        if mode is Insertion.FIXED:
            if fixed_log is None:
                fixed_log = (work / "fixed", _write_tables(_clean(work / "fixed"), names, records_per_table, seed))
            log_dir, log_records = fixed_log
        else:
            log_dir = _clean(work / f"growing{k}")
            log_records = _write_tables(log_dir, extracted, records_per_table, seed)
        broker = Broker()
        configs = [TableConfig(t, Nature.MASTER, "id") for t in extracted]
        create_topics(broker, configs)
        row_keys = {t: "id" for t in names}
        pumps = [
            Pump(LogTailer(log_dir, c.table, row_keys, read_latency_s=read_latency_s, chunk_lines=chunk_lines), c, broker)
            for c in configs
        ]
        threads = [threading.Thread(target=p.drain, name=f"tailer:{p.cfg.table}") for p in pumps]
        t0 = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - t0
        extracted_records = sum(p.stats.published for p in pumps)
        rows.append({
            "mode": mode.value, "tables": k, "log_records": log_records, "extracted_records": extracted_records,
            "elapsed_s": round(elapsed, 4), "records_per_s": round(extracted_records / elapsed, 2),
        })
    if csv_path is not None:
        header = {"bench": "tailer", "mode": mode.value, "records_per_table": records_per_table,
                  "total_tables": total_tables, "read_latency_s": read_latency_s, "chunk_lines": chunk_lines,
                  "seed": seed}
        cols = ("mode", "tables", "log_records", "extracted_records", "elapsed_s", "records_per_s")
        write_csv(csv_path, header, cols, ([r[c] for c in cols] for r in rows))
    return rows


def _clean(path: Path) -> Path:
    import shutil

    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# -- fault injection -----------------------------------------------------------


@dataclass
class FaultResult:
    passed: bool
    report: DiffReport | None
    result: RunResult | None
    error: str | None = None

    @property
    def pre_kill_rate(self) -> float | None:
        return self.result.metrics.pre_kill_rate if self.result else None

    @property
    def post_kill_rate(self) -> float | None:
        return self.result.metrics.post_kill_rate if self.result else None


def fault_inject(
    cfg: PipelineConfig, spec: WorkloadSpec, kills: Iterable[Kill], work_dir: str | Path
) -> FaultResult:
    """Run with scheduled worker kills; PASS iff the dump equals the oracle."""
    try:
        result = run(cfg, spec, work_dir, kills=kills)
    except RunTimeout as exc:
        return FaultResult(False, None, None, str(exc))
    report = verify_run(result, cfg.window_ms)
    passed = report.ok and not result.integrity
    return FaultResult(passed, report, result)
