"""Target data uploader and the embedded star-schema fact store.

Fact rows are upserted by a deterministic ``fact_id`` so that re-loading a
grain (redelivery, buffer replay, late correction) never duplicates it.
Window summaries are derived from the stored grains at export time.

Dump format: one row per line, tab separated, sorted by ``fact_id``::

    fact_id equip bucket_start start_ts end_ts kind qty good defect capacity
    availability performance quality oee

Quantities and ratios use six decimals; undefined ratios are ``null``.
"""

from __future__ import annotations

import math
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .hashing import fnv1a_64
from .oee import FactGrain, GrainKind, aggregate, window_start
from .producer import DeadLetterLog

WINDOW_KIND = "WINDOW"
DUMP_FIELDS = (
    "fact_id", "equip", "bucket_start", "start_ts", "end_ts", "kind", "qty", "good", "defect",
    "capacity", "availability", "performance", "quality", "oee",
)
RATIO_FIELDS = ("availability", "performance", "quality", "oee")
FLOAT_FIELDS = ("qty", "capacity") + RATIO_FIELDS
INT_FIELDS = ("bucket_start", "start_ts", "end_ts", "good", "defect")


class StoreWriteError(IOError):
    pass


class DumpFormatError(ValueError):
    pass


def fact_id(equip: str, start_ts: int, end_ts: int, kind: str) -> str:
    return f"{fnv1a_64(f'{equip}|{start_ts}|{end_ts}|{kind}'):016x}"


@dataclass(frozen=True)
class FactRow:
    fact_id: str
    equip: str
    bucket_start: int
    start_ts: int
    end_ts: int
    kind: str
    qty: float
    good: int
    defect: int
    capacity: float
    availability: float | None
    performance: float | None
    quality: float | None
    oee: float | None

    @classmethod
    def from_grain(cls, grain: FactGrain, window_ms: int) -> "FactRow":
        kind = GrainKind(grain.kind).value
        return cls(
            fact_id(grain.equip, grain.start_ts, grain.end_ts, kind),
            grain.equip, window_start(grain.start_ts, window_ms), grain.start_ts, grain.end_ts, kind,
            grain.qty, grain.good, grain.defect, grain.capacity,
            grain.availability, grain.performance, grain.quality, grain.oee,
        )

    def to_grain(self) -> FactGrain:
        return FactGrain(
            self.equip, self.start_ts, self.end_ts, GrainKind(self.kind), self.qty, self.good, self.defect,
            self.capacity, self.availability, self.performance, self.quality, self.oee,
        )

    def violations(self) -> list[str]:
        problems = []
        if self.end_ts <= self.start_ts:
            problems.append("end_ts <= start_ts")
        if self.fact_id != fact_id(self.equip, self.start_ts, self.end_ts, self.kind):
            problems.append("fact_id does not match key fields")
        for name in RATIO_FIELDS:
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0 and math.isfinite(v)):
                problems.append(f"{name} out of range")
        if self.qty < 0 or self.good < 0 or self.defect < 0:
            problems.append("negative measure")
        return problems


def rows_from_grains(grains: Iterable[FactGrain], window_ms: int) -> list[FactRow]:
    return [FactRow.from_grain(g, window_ms) for g in grains]


def window_summaries(rows: Iterable[FactRow], window_ms: int) -> list[FactRow]:
    """One WINDOW row per (equipment, window) pooled from grain rows."""
    groups: dict[tuple[str, int], list[FactGrain]] = defaultdict(list)
    for row in rows:
        if row.kind != WINDOW_KIND:
            groups[(row.equip, row.bucket_start)].append(row.to_grain())
    out = []
    for (equip, bucket), grains in groups.items():
        s = aggregate(grains, (bucket, bucket + window_ms), equip)
        out.append(
            FactRow(
                fact_id(equip, s.start_ts, s.end_ts, WINDOW_KIND), equip, bucket, s.start_ts, s.end_ts,
                WINDOW_KIND, s.qty, s.good, s.defect, s.capacity,
                s.availability, s.performance, s.quality, s.oee,
            )
        )
    return out


def _fmt(value: float | None) -> str:
    return "null" if value is None else f"{value:.6f}"


def format_row(row: FactRow) -> str:
    return "\t".join(
        [
            row.fact_id, row.equip, str(row.bucket_start), str(row.start_ts), str(row.end_ts), row.kind,
            _fmt(row.qty), str(row.good), str(row.defect), _fmt(row.capacity),
            _fmt(row.availability), _fmt(row.performance), _fmt(row.quality), _fmt(row.oee),
        ]
    )


def format_dump(rows: Iterable[FactRow]) -> str:
    return "".join(format_row(r) + "\n" for r in sorted(rows, key=lambda r: r.fact_id))


def parse_dump(text: str) -> list[dict]:
    """Parse a dump into dicts with typed values; raises :class:`DumpFormatError`."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(DUMP_FIELDS):
            raise DumpFormatError(f"line {lineno}: expected {len(DUMP_FIELDS)} fields, got {len(parts)}")
        rec: dict = dict(zip(DUMP_FIELDS, parts))
        try:
            for name in INT_FIELDS:
                rec[name] = int(rec[name])
            for name in FLOAT_FIELDS:
                rec[name] = None if rec[name] == "null" else float(rec[name])
        except ValueError as exc:
            raise DumpFormatError(f"line {lineno}: {exc}") from None
        out.append(rec)
    return out


class TargetStore:
    """Embedded fact table with upsert-by-``fact_id`` semantics.

    ``write_latency_s`` is charged once per statement batch of
    ``batch_size`` rows, outside the table lock, to emulate the round trip
    to a remote warehouse.  Writers from different partitions may run
    concurrently.
    """

    def __init__(
        self,
        window_ms: int,
        write_latency_s: float = 0.0,
        batch_size: int = 500,
        dead_letters: DeadLetterLog | None = None,
        max_retries: int = 50,
    ) -> None:
        self.window_ms = window_ms
        self.write_latency_s = write_latency_s
        self.batch_size = batch_size
        self.dead_letters = dead_letters if dead_letters is not None else DeadLetterLog()
        self.max_retries = max_retries
        self._rows: dict[str, FactRow] = {}
        self._lock = threading.Lock()
        self._fail_remaining = 0
        self.retries = 0
        self.statements = 0
        self.writes_by_partition: dict[int, int] = defaultdict(int)

    def fail_next(self, n: int) -> None:
        """Make the next ``n`` statement executions fail (fault injection)."""
        with self._lock:
            self._fail_remaining = n

    def _execute(self, batch: Sequence[FactRow], partition: int) -> None:
        if self.write_latency_s:
            time.sleep(self.write_latency_s)
        with self._lock:
            if self._fail_remaining > 0:
                self._fail_remaining -= 1
                raise StoreWriteError("injected write failure")
            for row in batch:
                self._rows[row.fact_id] = row
            self.statements += 1
            self.writes_by_partition[partition] += len(batch)

    def load(self, rows: Sequence[FactRow], partition: int = 0) -> int:
        """Upsert ``rows`` in order; returns how many were applied."""
        valid = []
        for row in rows:
            problems = row.violations()
            if problems:
                self.dead_letters.write("uploader", "; ".join(problems), raw=format_row(row).encode())
            else:
                valid.append(row)
        for i in range(0, len(valid), self.batch_size):
            batch = valid[i : i + self.batch_size]
            attempt = 0
            while True:
                try:
                    self._execute(batch, partition)
                    break
                except StoreWriteError:
                    attempt += 1
                    self.retries += 1
                    if attempt > self.max_retries:
                        raise
                    time.sleep(min(0.001 * 2**attempt, 0.1))
        return len(valid)

    def rows(self) -> list[FactRow]:
        with self._lock:
            return sorted(self._rows.values(), key=lambda r: r.fact_id)

    def __len__(self) -> int:
        return len(self._rows)

    def export(self, path: str | os.PathLike[str] | None = None) -> str:
        """Canonical dump of grains plus window summaries."""
        rows = self.rows()
        text = format_dump(rows + window_summaries(rows, self.window_ms))
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def integrity_scan(self) -> list[str]:
        """Row-level violations and overlapping grains of one equipment."""
        problems = []
        per_equip: dict[str, list[FactRow]] = defaultdict(list)
        for row in self.rows():
            problems.extend(f"{row.fact_id}: {p}" for p in row.violations())
            per_equip[row.equip].append(row)
        for equip, rows in per_equip.items():
            rows.sort(key=lambda r: r.start_ts)
            for a, b in zip(rows, rows[1:]):
                if b.start_ts < a.end_ts:
                    problems.append(f"{equip}: grains {a.fact_id} and {b.fact_id} overlap")
        return problems
