"""Message producer: tailed change records to broker topics.

Master tables are keyed by their row key so that compaction rebuilds the
table; operational tables are keyed by the business key so that all rows
of one business entity share a partition.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .broker import Broker, BrokerUnavailable, Nature
from .cdc_log import ChangeRecord, LogTailer, Op, Scalar

log = logging.getLogger(__name__)


class MissingKeyError(ValueError):
    """The record lacks (or has an unusable) partition-key column."""


@dataclass(frozen=True)
class TableConfig:
    table: str
    nature: Nature
    row_key_column: str
    business_key_column: str | None = None
    partition_count: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "nature", Nature(self.nature))
        if not self.row_key_column:
            raise ValueError(f"{self.table}: row_key_column is required")
        if self.nature is Nature.OPERATIONAL and not self.business_key_column:
            raise ValueError(f"{self.table}: operational tables need a business_key_column")
        if self.partition_count < 1:
            raise ValueError(f"{self.table}: partition_count must be >= 1")

    @property
    def partition_column(self) -> str:
        if self.nature is Nature.MASTER:
            return self.row_key_column
        assert self.business_key_column is not None
        return self.business_key_column


def canonical_key(value: Scalar) -> str:
    """Integers in plain decimal, strings unchanged; anything else is rejected."""
    if isinstance(value, bool) or value is None:
        raise MissingKeyError(f"unusable key value {value!r}")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    raise MissingKeyError(f"unusable key type {type(value).__name__}")


def select_key(record: ChangeRecord, cfg: TableConfig) -> str:
    if record.table != cfg.table:
        raise ValueError(f"record of {record.table!r} given config for {cfg.table!r}")
    column = cfg.partition_column
    if column not in record.row:
        raise MissingKeyError(f"{record.table}: column {column!r} missing")
    return canonical_key(record.row[column])


BUSINESS_KEY_HEADER = "business_key"


def message_headers(record: ChangeRecord, cfg: TableConfig) -> dict[str, str]:
    """The business key travels as a header so consumers can filter without decoding."""
    if cfg.business_key_column is None:
        return {}
    value = record.row.get(cfg.business_key_column)
    try:
        return {BUSINESS_KEY_HEADER: canonical_key(value)}
    except MissingKeyError:
        return {}


def encode_payload(record: ChangeRecord) -> bytes:
    return record.to_json().encode("utf-8")


def decode_payload(payload: bytes, row_key_column: str | None = None) -> ChangeRecord:
    return ChangeRecord.from_json(payload, row_key_column)


class DeadLetterLog:
    """Thread-safe error sink; optionally mirrored to a file.

    Each entry is the record's usual JSON line plus ``source`` and
    ``reason`` fields.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def write(self, source: str, reason: str, record: ChangeRecord | None = None, raw: bytes | None = None) -> None:
        entry: dict = {"source": source, "reason": reason}
        if record is not None:
            entry.update(json.loads(record.to_json()))
        elif raw is not None:
            entry["raw"] = raw.decode("utf-8", errors="replace")
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, separators=(",", ":")) + "\n")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class PumpStats:
    table: str
    published: int = 0
    dead_lettered: int = 0
    duplicates: int = 0
    retries: int = 0
    published_seqs: list[int] = field(default_factory=list)


class Pump:
    """Tail -> key -> publish -> checkpoint loop for one table.

    The checkpoint is written only after the broker accepted every record
    it covers, so a crash can re-publish but never skip.  With
    ``duplicate_fraction`` > 0 a seeded share of records is published
    twice, emulating redelivery after such a crash.
    """

    def __init__(
        self,
        tailer: LogTailer,
        cfg: TableConfig,
        broker: Broker,
        dead_letters: DeadLetterLog | None = None,
        checkpoint_path: str | os.PathLike[str] | None = None,
        checkpoint_every: int = 500,
        duplicate_fraction: float = 0.0,
        seed: int = 0,
        max_backoff_s: float = 0.5,
        batch_size: int = 512,
        record_seqs: bool = False,
    ) -> None:
        self.tailer = tailer
        self.cfg = cfg
        self.broker = broker
        self.dead_letters = dead_letters if dead_letters is not None else DeadLetterLog()
        self.checkpoint_path = checkpoint_path
        self.checkpoint_every = checkpoint_every
        self.duplicate_fraction = duplicate_fraction
        self._rng = random.Random(f"{seed}:{cfg.table}")
        self.max_backoff_s = max_backoff_s
        self.batch_size = batch_size
        self.record_seqs = record_seqs
        self.stats = PumpStats(cfg.table)
        self._since_checkpoint = 0

    def _publish(
        self, key: str, payload: bytes, tombstone: bool, headers: dict[str, str], stop: threading.Event | None
    ) -> bool:
        backoff = 0.001
        while True:
            try:
                self.broker.publish(self.cfg.table, key, payload, tombstone, headers)
                return True
            except BrokerUnavailable:
                self.stats.retries += 1
                if stop is not None and stop.is_set():
                    return False
                time.sleep(backoff)
                backoff = min(backoff * 2, self.max_backoff_s)

    def step(self, stop: threading.Event | None = None) -> int:
        """Publish one batch of newly tailed records; returns how many were read."""
        records = self.tailer.poll(self.batch_size)
        for record in records:
            try:
                key = select_key(record, self.cfg)
            except MissingKeyError as exc:
                self.dead_letters.write(f"producer:{self.cfg.table}", str(exc), record)
                self.stats.dead_lettered += 1
                continue
            payload = encode_payload(record)
            tombstone = record.op is Op.DELETE
            headers = message_headers(record, self.cfg)
            if not self._publish(key, payload, tombstone, headers, stop):
                return 0
            self.stats.published += 1
            if self.record_seqs:
                self.stats.published_seqs.append(record.seq)
            if self.duplicate_fraction and self._rng.random() < self.duplicate_fraction:
                if not self._publish(key, payload, tombstone, headers, stop):
                    return 0
                self.stats.duplicates += 1
        self._since_checkpoint += len(records)
        if self.checkpoint_path is not None and records and self._since_checkpoint >= self.checkpoint_every:
            self.checkpoint()
        return len(records)

    def checkpoint(self) -> None:
        if self.checkpoint_path is not None:
            self.tailer.checkpoint(self.checkpoint_path)
            self._since_checkpoint = 0

    def drain(self) -> PumpStats:
        """Publish until caught up with the log, then checkpoint."""
        while self.step():
            pass
        self.checkpoint()
        return self.stats

    def run(self, stop: threading.Event, caught_up: threading.Event | None = None) -> PumpStats:
        """Publish continuously until ``stop``; sets ``caught_up`` whenever idle."""
        while not stop.is_set():
            if self.step(stop) == 0:
                self.checkpoint()
                if caught_up is not None:
                    caught_up.set()
                stop.wait(self.tailer.poll_interval)
            elif caught_up is not None:
                caught_up.clear()
        return self.stats


def pump(
    tailer: LogTailer,
    cfg: TableConfig,
    broker: Broker,
    dead_letters: DeadLetterLog | None = None,
    checkpoint_path: str | os.PathLike[str] | None = None,
) -> PumpStats:
    """Publish everything currently in the log for ``cfg.table``."""
    return Pump(tailer, cfg, broker, dead_letters, checkpoint_path).drain()


def create_topics(broker: Broker, configs: Iterable[TableConfig]) -> None:
    for cfg in configs:
        broker.create_topic(cfg.table, cfg.partition_count, cfg.nature)
