"""Stream processor worker.

A worker belongs to the ``processors`` consumer group on the operational
topic.  For every master topic it keeps a cache of the rows whose business
key hashes to one of its operational partitions: the cache is rebuilt from
the topic snapshot on every reassignment and then follows the topic live.

Operational runs are joined against the cache.  A run whose master rows
have not all arrived goes to the late-message buffer, stored in the
broker's shared register so another worker can finish it after a failure.
After each operational message, and on an idle timer, buffered runs older
than the cache's newest transaction timestamp are retried.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .broker import Assignment, Broker, BrokerUnavailable, Message, Nature, Rebalance, TopicPartition
from .cdc_log import ChangeRecord, Op
from .hashing import partition_for
from .oee import FactGrain, OeeError, split_windows
from .producer import BUSINESS_KEY_HEADER, DeadLetterLog, MissingKeyError, TableConfig, canonical_key, decode_payload
from .steelworks import ClaimInputs, MasterLookup, Missing, SteelworksModel
from .uploader import TargetStore, rows_from_grains

log = logging.getLogger(__name__)

GROUP = "processors"
BUFFER_PREFIX = "buffer/"


class Mode(str, Enum):
    CACHED = "CACHED"
    LOOKBACK = "LOOKBACK"


class Disposition(str, Enum):
    PROCESSED = "PROCESSED"
    BUFFERED = "BUFFERED"
    DEAD_LETTER = "DEAD_LETTER"


class NotReady(RuntimeError):
    """The worker's cache is being rebuilt; operational input must wait."""


class WorkerKilled(Exception):
    pass


@dataclass(frozen=True)
class TransformResult:
    grains: list[FactGrain]
    key: tuple[str, int, int]
    disposition: Disposition


@dataclass
class LateBufferEntry:
    business_key: str
    record: ChangeRecord
    reason: Missing
    enqueue_ts: int
    attempt_count: int
    key: tuple[str, int, int]
    tried_at_version: int = -1

    @property
    def store_key(self) -> str:
        return buffer_key(*self.key)

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "business_key": self.business_key,
                "record": json.loads(self.record.to_json()),
                "reason": {"table": self.reason.table, "key": self.reason.key},
                "enqueue_ts": self.enqueue_ts,
                "attempt_count": self.attempt_count,
                "key": list(self.key),
            },
            separators=(",", ":"),
        ).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes, row_key_column: str | None = None) -> "LateBufferEntry":
        obj = json.loads(data)
        topic, partition, offset = obj["key"]
        return cls(
            obj["business_key"],
            ChangeRecord.from_dict(obj["record"], row_key_column),
            Missing(obj["reason"]["table"], obj["reason"]["key"]),
            obj["enqueue_ts"],
            obj["attempt_count"],
            (topic, int(partition), int(offset)),
        )


def buffer_key(topic: str, partition: int, offset: int) -> str:
    return f"{BUFFER_PREFIX}{topic}/{partition}/{offset:012d}"


class MasterCacheTable:
    """Master rows of one table, restricted to admitted business keys.

    Rows are indexed by row key; each business key also keeps its rows in
    transaction-time order for point-in-time reads.
    """

    def __init__(self, cfg: TableConfig, admits: Callable[[str], bool]) -> None:
        self.cfg = cfg
        self.table = cfg.table
        self.admits = admits
        self.rows: dict[str, dict] = {}
        self._tx: dict[str, int] = {}
        self._bk_of: dict[str, str] = {}
        self.history: dict[str, list[tuple[int, str]]] = {}
        self.high_water_tx_ts = 0

    @property
    def filter_keys(self) -> set[str]:
        return set(self.history)

    def clear(self) -> None:
        self.rows.clear()
        self._tx.clear()
        self._bk_of.clear()
        self.history.clear()
        self.high_water_tx_ts = 0

    def apply(self, record: ChangeRecord) -> bool:
        """Upsert or delete ``record``; returns whether its business key is admitted."""
        bk_col = self.cfg.business_key_column or self.cfg.row_key_column
        row_key = canonical_key(record.row[self.cfg.row_key_column])
        raw_bk = record.row.get(bk_col)
        bk = canonical_key(raw_bk) if raw_bk is not None else self._bk_of.get(row_key)
        if bk is None or not self.admits(bk):
            return False
        self._drop(row_key)
        if record.op is not Op.DELETE:
            self.rows[row_key] = record.row
            self._tx[row_key] = record.tx_ts
            self._bk_of[row_key] = bk
            entries = self.history.setdefault(bk, [])
            entries.append((record.tx_ts, row_key))
            if len(entries) > 1 and entries[-2][0] > record.tx_ts:
                entries.sort()
        self.high_water_tx_ts = max(self.high_water_tx_ts, record.tx_ts)
        return True

    def _drop(self, row_key: str) -> None:
        if row_key not in self.rows:
            return
        del self.rows[row_key]
        tx = self._tx.pop(row_key)
        bk = self._bk_of.pop(row_key)
        entries = self.history[bk]
        entries.remove((tx, row_key))
        if not entries:
            del self.history[bk]

    def as_of(self, business_key: str, tx_ts: int) -> list[dict]:
        """Rows of ``business_key`` written at or before ``tx_ts``, oldest first."""
        return [self.rows[rk] for tx, rk in self.history.get(business_key, []) if tx <= tx_ts]


class MasterCache:
    """The worker's in-memory master tables; serves lookups for the join."""

    def __init__(self, configs: Iterable[TableConfig], admits: Callable[[str], bool]) -> None:
        self.tables = {c.table: MasterCacheTable(c, admits) for c in configs if c.nature is Nature.MASTER}
        self.version = 0

    def reset(self) -> None:
        for t in self.tables.values():
            t.clear()
        self.version += 1

    def apply(self, record: ChangeRecord) -> bool:
        admitted = self.tables[record.table].apply(record)
        if admitted:
            self.version += 1
        return admitted

    def get(self, table: str, row_key: str) -> dict | None:
        return self.tables[table].rows.get(row_key)

    def get_many(self, table: str, row_keys: list[str]) -> dict[str, dict]:
        rows = self.tables[table].rows
        return {k: rows[k] for k in row_keys if k in rows}

    def high_water(self) -> int:
        return max((t.high_water_tx_ts for t in self.tables.values()), default=0)

    def __len__(self) -> int:
        return sum(len(t.rows) for t in self.tables.values())


@dataclass
class WorkerStats:
    processed: int = 0
    duplicates: int = 0
    master_applied: int = 0
    grains: int = 0
    buffered_total: int = 0
    reprocessed: int = 0
    buffer_peak: int = 0
    dead_letters: int = 0
    bootstrap_ms: list[float] = field(default_factory=list)
    first_result_at: float | None = None
    diagnostics: Counter = field(default_factory=Counter)


class Worker:
    """One stream-processor node.

    ``mode=CACHED`` joins against the in-memory master cache;
    ``mode=LOOKBACK`` queries ``source`` (the source table store) instead
    and never builds a cache.
    """

    def __init__(
        self,
        worker_id: str,
        broker: Broker,
        model: SteelworksModel,
        configs: list[TableConfig],
        store: TargetStore,
        window_ms: int,
        mode: Mode = Mode.CACHED,
        source: MasterLookup | None = None,
        dead_letters: DeadLetterLog | None = None,
        group: str = GROUP,
        poll_batch: int = 64,
        poll_timeout_s: float = 0.01,
        sweep_interval_s: float = 0.5,
        retry_cap: int = 1000,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.worker_id = worker_id
        self.broker = broker
        self.model = model
        self.configs = {c.table: c for c in configs}
        self.store = store
        self.window_ms = window_ms
        self.mode = Mode(mode)
        if self.mode is Mode.LOOKBACK and source is None:
            raise ValueError("LOOKBACK mode needs a source store")
        self.source = source
        self.dead_letters = dead_letters if dead_letters is not None else DeadLetterLog()
        self.group = group
        self.poll_batch = poll_batch
        self.poll_timeout_s = poll_timeout_s
        self.sweep_interval_s = sweep_interval_s
        self.retry_cap = retry_cap
        self.clock = clock

        op = self.configs[model.operational_table]
        self.op_cfg = op
        self.assigned: frozenset[TopicPartition] = frozenset()
        self._assigned_parts: frozenset[int] = frozenset()
        self.cache = MasterCache(configs, self.admits)
        self.master_positions: dict[TopicPartition, int] = {}
        self.buffer: dict[str, LateBufferEntry] = {}
        self.ready = False
        self.stats = WorkerStats()
        self._done: dict[TopicPartition, int] = {}
        self._kill = threading.Event()
        self._last_sweep = 0.0
        self.killed = False

    # -- key filter --------------------------------------------------------

    def admits(self, business_key: str) -> bool:
        return partition_for(business_key, self.op_cfg.partition_count) in self._assigned_parts

    # -- lifecycle ---------------------------------------------------------

    def kill(self) -> None:
        """Ask the worker to stop abruptly at its next check (no commit)."""
        self._kill.set()

    def _check_kill(self) -> None:
        if self._kill.is_set():
            raise WorkerKilled(self.worker_id)

    def _lookup(self) -> MasterLookup:
        return self.cache if self.mode is Mode.CACHED else self.source  # type: ignore[return-value]

    def _high_water(self) -> int:
        if self.mode is Mode.CACHED:
            return self.cache.high_water()
        return self.source.high_water()  # type: ignore[union-attr]

    def _version(self) -> int:
        if self.mode is Mode.CACHED:
            return self.cache.version
        return getattr(self.source, "version", 0)

    # -- cache ---------------------------------------------------------------

    def cache_bootstrap(self, assignment: Assignment) -> None:
        """Reset the cache and refill it from master snapshots for ``assignment``."""
        started = time.perf_counter()
        self.ready = False
        self.assigned = frozenset(tp for tp in assignment.partitions if tp[0] == self.op_cfg.table)
        self._assigned_parts = frozenset(p for _, p in self.assigned)
        self._done = {tp: off for tp, off in self._done.items() if tp in self.assigned}
        if self.mode is Mode.CACHED:
            self.cache.reset()
            self.master_positions.clear()
        if self.mode is Mode.CACHED and self._assigned_parts:
            for table, cfg in self.configs.items():
                if cfg.nature is not Nature.MASTER:
                    continue
                snap, ends = self.broker.snapshot_messages(table)
                for i, msg in enumerate(snap.values()):
                    if i % 256 == 0:
                        self._check_kill()
                    if self._foreign(msg):
                        continue
                    self.cache.apply(decode_payload(msg.payload, cfg.row_key_column))
                for p, end in enumerate(ends):
                    self.master_positions[(table, p)] = end
        self._reload_buffer()
        self.ready = True
        self.stats.bootstrap_ms.append((time.perf_counter() - started) * 1000.0)

    def _reload_buffer(self) -> None:
        self.buffer = {}
        self.merge_shared_buffer()

    def merge_shared_buffer(self) -> int:
        """Pick up buffer entries of owned partitions written by a previous owner."""
        added = 0
        for topic, partition in sorted(self.assigned):
            for key in self.broker.shared_keys(f"{BUFFER_PREFIX}{topic}/{partition}/"):
                if key in self.buffer:
                    continue
                data = self.broker.get_shared(key)
                if data is not None:
                    self.buffer[key] = LateBufferEntry.from_bytes(data, self.op_cfg.row_key_column)
                    added += 1
        return added

    def _foreign(self, msg: Message) -> bool:
        """True when the header shows the row belongs to another worker's keys."""
        bk = msg.header(BUSINESS_KEY_HEADER)
        return bk is not None and not self.admits(bk)

    def cache_apply(self, msg: Message) -> bool:
        if self._foreign(msg):
            return False
        cfg = self.configs[msg.topic]
        try:
            record = decode_payload(msg.payload, cfg.row_key_column)
        except ValueError as exc:
            self.dead_letters.write(f"worker:{self.worker_id}", f"bad master payload: {exc}", raw=msg.payload)
            self.stats.dead_letters += 1
            return False
        admitted = self.cache.apply(record)
        if admitted:
            self.stats.master_applied += 1
        return admitted

    def drain_master(self, limit: int = 4096) -> int:
        """Apply newly published master messages; returns how many were read."""
        if self.mode is not Mode.CACHED:
            return 0
        n = 0
        for tp, pos in list(self.master_positions.items()):
            msgs = self.broker.read(tp[0], tp[1], pos, limit)
            for msg in msgs:
                self.cache_apply(msg)
            self.master_positions[tp] = pos + len(msgs)
            n += len(msgs)
        return n

    # -- transform -----------------------------------------------------------

    def _grains_for(self, inputs: ClaimInputs) -> list[FactGrain]:
        return split_windows(
            inputs.status, inputs.production, inputs.quality, inputs.span, self.window_ms, self.stats.diagnostics
        )

    def transform(self, msg: Message) -> TransformResult:
        """Join one operational message with master data."""
        if not self.ready:
            raise NotReady(self.worker_id)
        tp = (msg.topic, msg.partition)
        key = (msg.topic, msg.partition, msg.offset)
        if msg.offset < self._done.get(tp, 0) or buffer_key(*key) in self.buffer:
            self.stats.duplicates += 1
            return TransformResult([], key, Disposition.PROCESSED)
        try:
            record = decode_payload(msg.payload, self.op_cfg.row_key_column)
            if record.op is Op.DELETE:
                raise ValueError("operational deletes are not transformed")
            inputs = self.model.resolve(record.row, self._lookup())
            grains = [] if isinstance(inputs, Missing) else self._grains_for(inputs)
        except (ValueError, KeyError, TypeError, OeeError, MissingKeyError) as exc:
            self.dead_letters.write(f"worker:{self.worker_id}", f"poison message {key}: {exc}", raw=msg.payload)
            self.stats.dead_letters += 1
            self._done[tp] = msg.offset + 1
            return TransformResult([], key, Disposition.DEAD_LETTER)
        self._done[tp] = msg.offset + 1
        if isinstance(inputs, Missing):
            entry = LateBufferEntry(
                canonical_key(record.row[self.op_cfg.business_key_column]),
                record, inputs, int(self.clock() * 1000), 1, key, self._version(),
            )
            self.broker.put_shared(entry.store_key, entry.to_bytes())
            self.buffer[entry.store_key] = entry
            self.stats.buffered_total += 1
            self.stats.buffer_peak = max(self.stats.buffer_peak, len(self.buffer))
            return TransformResult([], key, Disposition.BUFFERED)
        return TransformResult(grains, key, Disposition.PROCESSED)

    def emit(self, grains: list[FactGrain], partition: int) -> None:
        if not grains:
            return
        self.store.load(rows_from_grains(grains, self.window_ms), partition)
        self.stats.grains += len(grains)
        if self.stats.first_result_at is None:
            self.stats.first_result_at = time.perf_counter()

    def buffer_sweep(self) -> int:
        """Retry buffered runs older than the cache high-water mark.

        Entries at or after the high-water mark are left untouched, as are
        entries already tried against the current cache contents.
        """
        if not self.buffer:
            return 0
        try:
            high_water = self._high_water()
            version = self._version()
            done = 0
            for skey in sorted(self.buffer, key=lambda k: (self.buffer[k].record.tx_ts, k)):
                entry = self.buffer[skey]
                if entry.record.tx_ts >= high_water or entry.tried_at_version == version:
                    continue
                self._check_kill()
                inputs = self.model.resolve(entry.record.row, self._lookup())
                if isinstance(inputs, Missing):
                    entry.attempt_count += 1
                    entry.reason = inputs
                    entry.tried_at_version = version
                    if entry.attempt_count > self.retry_cap:
                        self.dead_letters.write(
                            f"worker:{self.worker_id}", f"buffer retry cap exceeded: {inputs}", entry.record
                        )
                        self.stats.dead_letters += 1
                        self.broker.delete_shared(skey)
                        del self.buffer[skey]
                    else:
                        self.broker.put_shared(skey, entry.to_bytes())
                    continue
                self.emit(self._grains_for(inputs), entry.key[1])
                self.broker.delete_shared(skey)
                del self.buffer[skey]
                done += 1
            self.stats.reprocessed += done
            return done
        except BrokerUnavailable:
            return 0

    # -- main loop -----------------------------------------------------------

    def handle(self, msg: Message) -> TransformResult:
        result = self.transform(msg)
        self.emit(result.grains, msg.partition)
        self._check_kill()  # a crash here leaves the offset uncommitted: redelivery
        self.broker.commit(self.group, self.worker_id, {(msg.topic, msg.partition): msg.offset + 1})
        if result.disposition is not Disposition.DEAD_LETTER:
            self.stats.processed += 1
        return result

    def step(self) -> int:
        """One poll/process iteration; returns the number of operational messages handled."""
        self._check_kill()
        items = self.broker.poll(self.group, self.worker_id, self.poll_batch, self.poll_timeout_s)
        if items and isinstance(items[0], Rebalance):
            self.cache_bootstrap(items[0].assignment)
            self._last_sweep = time.monotonic()
            return 0
        if not self.ready:
            return 0
        self.drain_master()
        handled = 0
        for msg in items:
            self._check_kill()
            assert isinstance(msg, Message)
            self.handle(msg)
            handled += 1
            self.buffer_sweep()
        now = time.monotonic()
        if handled:
            self._last_sweep = now
        elif now - self._last_sweep >= self.sweep_interval_s:
            try:
                self.merge_shared_buffer()
            except BrokerUnavailable:
                pass
            self.buffer_sweep()
            self._last_sweep = now
        return handled

    def run(self, stop: threading.Event) -> None:
        """Process until ``stop`` is set or the worker is killed."""
        try:
            while not stop.is_set():
                self.step()
        except WorkerKilled:
            self.killed = True
            log.info("worker %s killed", self.worker_id)
