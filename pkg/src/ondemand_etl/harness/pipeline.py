"""End-to-end pipeline run: generate, pump, process, load, export.

With ``preload`` the whole log is generated and published before any
worker starts, so the measured interval covers the processor stage only.
Otherwise the generator writes the log at a paced rate while pumps tail
it and workers consume concurrently, which is what makes late master data
actually arrive late.

A run is complete when every table's records are published, every
operational partition is committed to its end offset and the shared late
buffer is empty.  It then has to stay complete for ``quiescence_s``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from ..broker import Broker, Nature
from ..cdc_log import CdcLogWriter, ChangeRecord, LogTailer, read_log
from ..processor import BUFFER_PREFIX, GROUP, Mode, Worker
from ..producer import DeadLetterLog, Pump, create_topics
from ..source_store import SourceStore
from ..steelworks import model_for
from ..uploader import TargetStore
from ..workload import Manifest, WorkloadSpec, generate
from .config import ConfigError, PipelineConfig, describe
from .metrics import RunMetrics, Sampler, samples_csv

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Unrecoverable failure of one pipeline stage."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class RunTimeout(StageError):
    pass


@dataclass(frozen=True)
class Kill:
    worker_id: str
    at_fraction: float

    @classmethod
    def parse(cls, text: str) -> "Kill":
        """``"w2@0.5"`` -> Kill("w2", 0.5)."""
        wid, sep, frac = text.partition("@")
        try:
            kill = cls(wid.strip(), float(frac)) if sep else None
        except ValueError:
            kill = None
        if kill is None or not kill.worker_id or not 0.0 <= kill.at_fraction <= 1.0:
            raise ConfigError(f"bad kill spec {text!r}, expected WORKER@FRACTION")
        return kill


@dataclass
class RunResult:
    metrics: RunMetrics
    dump: str
    manifest: Manifest
    work_dir: Path
    log_dir: Path
    integrity: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)


def worker_ids(n: int) -> list[str]:
    return [f"w{i}" for i in range(1, n + 1)]


class PacedWriter:
    """Log writer wrapper that pauses every ``chunk`` appends."""

    def __init__(self, writer: CdcLogWriter, chunk: int, pause_s: float, stop: threading.Event) -> None:
        self.writer = writer
        self.chunk = chunk
        self.pause_s = pause_s
        self.stop = stop
        self.written = 0

    def append(self, record: ChangeRecord) -> int:
        if self.stop.is_set():
            raise StageError("generate", "run aborted")
        seq = self.writer.append(record)
        self.written += 1
        if self.pause_s and self.written % self.chunk == 0:
            time.sleep(self.pause_s)
        return seq


def _fresh(path: Path) -> Path:
    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()
    return path


class _Run:
    def __init__(
        self,
        cfg: PipelineConfig,
        spec: WorkloadSpec,
        work_dir: str | Path,
        kills: Iterable[Kill],
        source_dir: str | Path | None,
        on_tick: Callable[["_Run"], None] | None,
    ) -> None:
        self.cfg = cfg
        self.spec = spec
        self.work = Path(work_dir)
        self.kills = sorted(kills, key=lambda k: k.at_fraction)
        self.source_dir = Path(source_dir) if source_dir is not None else None
        self.on_tick = on_tick

        if self.source_dir is not None:
            # an existing log fixes the workload; only redelivery stays configurable
            recorded = WorkloadSpec(**Manifest.load(self.source_dir / "manifest.json").spec)
            spec = self.spec = dataclasses.replace(recorded, duplicate_fraction=spec.duplicate_fraction)
        self.model = model_for(spec.schema_preset)
        self.configs = cfg.table_configs(spec)
        self.row_keys = {c.table: c.row_key_column for c in self.configs}
        self.op_table = next(c.table for c in self.configs if c.nature is Nature.OPERATIONAL)
        ids = worker_ids(cfg.worker_count)
        for k in self.kills:
            if k.worker_id not in ids:
                raise ConfigError(f"kill target {k.worker_id!r} is not one of {ids[0]}..{ids[-1]}")
        self.work.mkdir(parents=True, exist_ok=True)

        self.errors: list[tuple[str, BaseException]] = []
        self.threads: list[threading.Thread] = []
        self.stop_pumps = threading.Event()
        self.stop_workers = threading.Event()
        self.generated = threading.Event()
        self.manifest: Manifest | None = None
        self.metrics = RunMetrics()
        self.worker_threads: dict[str, threading.Thread] = {}
        self.workers: dict[str, Worker] = {}
        self.departed: set[str] = set()
        self.pumps: list[Pump] = []
        self.progress = 0.0

    # -- helpers ------------------------------------------------------------

    def _spawn(self, name: str, target: Callable[[], Any]) -> threading.Thread:
        def body() -> None:
            try:
                target()
            except BaseException as exc:  # reported by the monitor loop
                self.errors.append((name, exc))

        thread = threading.Thread(target=body, name=name, daemon=True)
        thread.start()
        self.threads.append(thread)
        return thread

    def _committed(self) -> int:
        committed = self.broker.committed(GROUP)
        return sum(committed.get((self.op_table, p), 0) for p in range(self.cfg.partition_count))

    def _pumps_done(self) -> bool:
        if not self.generated.is_set() or self.manifest is None:
            return False
        return all(
            p.stats.published + p.stats.dead_lettered >= self.manifest.counts.get(p.cfg.table, 0) for p in self.pumps
        )

    def diagnostics(self) -> dict[str, Any]:
        return {
            "generated": self.generated.is_set(),
            "published": {p.cfg.table: p.stats.published for p in self.pumps},
            "op_end_offsets": sum(self.broker.end_offsets(self.op_table)),
            "op_committed": self._committed(),
            "buffered": len(self.broker.shared_keys(BUFFER_PREFIX)),
            "live_workers": sorted(w for w, t in self.worker_threads.items() if t.is_alive()),
        }

    # -- stages -------------------------------------------------------------

    def _setup(self) -> None:
        cfg = self.cfg
        persist = Path(cfg.persist_dir) if cfg.persist_dir else None
        if persist is not None:
            _fresh(persist)
        self.broker = Broker(persist)
        create_topics(self.broker, self.configs)
        self.dead = DeadLetterLog(_fresh(self.work / "dead_letters.jsonl"))
        self.store = TargetStore(cfg.window_ms, cfg.write_latency_s, cfg.write_batch, self.dead)
        self.source: SourceStore | None = None
        if cfg.mode is Mode.LOOKBACK:
            self.source = SourceStore(_fresh(self.work / "source.db"), self.row_keys, cfg.query_latency_s)
        _fresh(self.work / "checkpoints").mkdir()

    def _start_log(self) -> None:
        if self.source_dir is not None:
            self.log_dir = self.source_dir / "log"
            self.manifest = Manifest.load(self.source_dir / "manifest.json")
            if self.source is not None:
                for record in read_log(self.log_dir, self.row_keys):
                    self.source.apply(record)
                self.source.commit()
            self.generated.set()
            return
        self.log_dir = _fresh(self.work / "log")
        writer = CdcLogWriter(self.log_dir, self.row_keys)
        if self.cfg.preload:
            self.manifest = generate(self.spec, writer, self.source)
            writer.close()
            self.generated.set()
            return

        def produce() -> None:
            paced = PacedWriter(writer, self.cfg.replay_chunk, self.cfg.replay_pause_s, self.stop_pumps)
            try:
                self.manifest = generate(self.spec, paced, self.source)  # type: ignore[arg-type]
            finally:
                writer.close()
            self.generated.set()

        self._spawn("generate", produce)

    def _start_pumps(self) -> None:
        for c in self.configs:
            tailer = LogTailer(self.log_dir, c.table, self.row_keys, poll_interval=0.005,
                               read_latency_s=self.cfg.read_latency_s)
            self.pumps.append(
                Pump(tailer, c, self.broker, self.dead, self.work / "checkpoints" / c.table,
                     duplicate_fraction=self.spec.duplicate_fraction, seed=self.spec.seed)
            )
        if self.cfg.preload:
            for p in self.pumps:
                p.drain()
            return
        for p in self.pumps:
            self._spawn(f"producer:{p.cfg.table}", lambda p=p: p.run(self.stop_pumps))

    def _start_workers(self) -> None:
        cfg = self.cfg
        for wid in worker_ids(cfg.worker_count):
            self.workers[wid] = Worker(
                wid, self.broker, self.model, self.configs, self.store, cfg.window_ms, cfg.mode,
                source=self.source, dead_letters=self.dead, poll_batch=cfg.poll_batch,
                sweep_interval_s=cfg.sweep_interval_s, retry_cap=cfg.retry_cap,
            )
        self.broker.subscribe(GROUP, list(self.workers), [self.op_table])
        for wid, w in self.workers.items():
            self.worker_threads[wid] = self._spawn(f"processor:{wid}", lambda w=w: w.run(self.stop_workers))

    def _start_sampler(self) -> Sampler:
        sampler = Sampler(self.cfg.sample_interval_s)
        for wid, w in self.workers.items():
            sampler.add("processor", wid, lambda w=w: (w.stats.processed, len(w.buffer), w.stats.dead_letters))
        for p in self.pumps:
            sampler.add("producer", p.cfg.table, lambda p=p: (p.stats.published, 0, p.stats.dead_lettered))
        sampler.add("uploader", "store", lambda: (self.store.statements, 0, len(self.dead)))
        sampler.start()
        return sampler

    def _kill(self, kill: Kill, now: float, committed: int) -> None:
        worker = self.workers[kill.worker_id]
        worker.kill()
        thread = self.worker_threads[kill.worker_id]
        thread.join(timeout=10.0)
        self.broker.leave(GROUP, kill.worker_id)
        self.departed.add(kill.worker_id)
        if self.kill_time is None:
            self.kill_time, self.committed_at_kill = now, committed
        self.metrics.kills.append((kill.worker_id, round(self.progress, 4)))
        log.info("killed %s at progress %.3f", kill.worker_id, self.progress)

    def _reap(self) -> None:
        """Evict workers whose thread ended on its own, as a session timeout would."""
        for wid, thread in self.worker_threads.items():
            if wid not in self.departed and not thread.is_alive():
                log.info("worker %s is gone, leaving the group on its behalf", wid)
                self.broker.leave(GROUP, wid)
                self.departed.add(wid)

    # -- main ---------------------------------------------------------------

    def execute(self) -> RunResult:
        cfg = self.cfg
        t_start = time.perf_counter()
        self._setup()
        sampler: Sampler | None = None
        pending = list(self.kills)
        self.kill_time: float | None = None
        self.committed_at_kill = 0
        try:
            self._start_log()
            self._start_pumps()
            t_proc0 = time.perf_counter()
            self._start_workers()
            sampler = self._start_sampler()
            t_done: float | None = None
            state: tuple | None = None
            while True:
                if self.errors:
                    stage, exc = self.errors[0]
                    raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
                now = time.perf_counter()
                if now - t_start > cfg.deadline_s:
                    raise RunTimeout("deadline", f"run exceeded {cfg.deadline_s}s: {json.dumps(self.diagnostics())}")
                committed = self._committed()
                ends = sum(self.broker.end_offsets(self.op_table))
                expected = ends if self._pumps_done() else max(ends, self.spec.records_per_table)
                self.progress = committed / expected if expected else 1.0
                while pending and pending[0].at_fraction <= self.progress:
                    self._kill(pending.pop(0), now, committed)
                self._reap()
                if self.on_tick is not None:
                    self.on_tick(self)
                complete = (
                    self._pumps_done() and committed == ends and not self.broker.shared_keys(BUFFER_PREFIX)
                )
                if complete and not pending:
                    snapshot = (committed, self.store.statements, len(self.dead))
                    if t_done is None or snapshot != state:
                        t_done, state = now, snapshot
                    elif now - t_done >= cfg.quiescence_s:
                        break
                else:
                    t_done = None
                time.sleep(0.002)
        finally:
            self.stop_workers.set()
            self.stop_pumps.set()
            for t in self.threads:
                t.join(timeout=10.0)
            if sampler is not None:
                sampler.stop()
            self.broker.close()
            if self.source is not None:
                self.source.close()

        assert self.manifest is not None
        m = self.metrics
        m.samples = sampler.samples if sampler is not None else []
        m.total_runtime_s = time.perf_counter() - t_start
        m.processing_s = t_done - t_proc0
        m.operational_records = self.manifest.counts[self.op_table]
        m.throughput = m.operational_records / m.processing_s if m.processing_s > 0 else 0.0
        diag: Counter = Counter()
        for w in self.workers.values():
            m.bootstrap_ms.extend(w.stats.bootstrap_ms)
            m.buffer_peak = max(m.buffer_peak, w.stats.buffer_peak)
            m.buffered_total += w.stats.buffered_total
            m.reprocessed += w.stats.reprocessed
            m.duplicates_skipped += w.stats.duplicates
            diag.update(w.stats.diagnostics)
        m.diagnostics = dict(diag)
        m.duplicates_published = sum(p.stats.duplicates for p in self.pumps)
        m.dead_letters = len(self.dead)
        if self.kill_time is not None:
            m.pre_kill_rate = self.committed_at_kill / max(self.kill_time - t_proc0, 1e-9)
            m.post_kill_rate = (ends - self.committed_at_kill) / max(t_done - self.kill_time, 1e-9)

        header = describe(cfg, self.spec)
        dump = self.store.export(self.work / "facts.dump")
        samples_csv(self.work / "metrics.csv", header, m.samples)
        (self.work / "summary.json").write_text(json.dumps({"config": header, "metrics": m.summary()}, indent=2))
        return RunResult(m, dump, self.manifest, self.work, self.log_dir, self.store.integrity_scan(), header)


# Workers sleep in emulated remote calls; a short switch interval lets a
# woken worker take the interpreter lock without waiting out a busy peer.
SWITCH_INTERVAL_S = 0.0005


def run(
    cfg: PipelineConfig,
    spec: WorkloadSpec,
    work_dir: str | Path,
    kills: Iterable[Kill] = (),
    source_dir: str | Path | None = None,
    on_tick: Callable[[Any], None] | None = None,
) -> RunResult:
    """Run the whole pipeline once; raises :class:`StageError` on failure."""
    previous = sys.getswitchinterval()
    sys.setswitchinterval(SWITCH_INTERVAL_S)
    try:
        return _Run(cfg, spec, work_dir, kills, source_dir, on_tick).execute()
    finally:
        sys.setswitchinterval(previous)
