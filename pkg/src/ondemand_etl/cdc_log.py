"""Append-only change log shared by all tables of one source database.

Every insert, update and delete on a source table becomes one
:class:`ChangeRecord`.  Records are written as UTF-8 JSON, one per line,
with explicit field names::

    {"seq":1,"table":"production","op":"INSERT","tx_ts":1700000000000,"row":{...}}

Line order equals ``seq`` order.  The log is split into numbered segment
files (``000000.cdc``, ``000001.cdc`` ...) holding ``segment_size`` records
each; segment ``i`` holds sequence numbers ``i*segment_size+1`` through
``(i+1)*segment_size``.

A :class:`LogTailer` follows the log for a single table.  All tables are
interleaved in the same files, so each tailer decodes every record and
keeps only its own.  Its position is a :class:`LogOffset` that can be
checkpointed to a one-line text file ``"<segment> <seq>"``.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping

DEFAULT_SEGMENT_SIZE = 100_000
DEFAULT_POLL_INTERVAL_S = 0.05
_META_FILE = "meta.json"
_SEGMENT_SUFFIX = ".cdc"

Scalar = str | int | float | bool | None


class CdcLogError(Exception):
    """Base class for change-log errors."""


class LogValidationError(CdcLogError):
    """A record violates the change-record invariants."""


class LogConfigError(CdcLogError):
    """A table is not part of the log configuration."""


class LogDecodeError(CdcLogError):
    """A complete line in a segment could not be decoded."""

    def __init__(self, segment: int, byte_offset: int, reason: str) -> None:
        super().__init__(f"segment {segment} byte {byte_offset}: {reason}")
        self.segment = segment
        self.byte_offset = byte_offset
        self.reason = reason


class Op(str, Enum):
    INSERT = "INSERT"
    UPDATE = "UPDATE"
    DELETE = "DELETE"


@dataclass(frozen=True)
class ChangeRecord:
    """One row change.  ``seq`` is 0 until the log assigns it."""

    table: str
    op: Op
    tx_ts: int
    row: dict[str, Scalar]
    seq: int = 0
    row_key: Scalar = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "table": self.table,
                "op": self.op.value,
                "tx_ts": self.tx_ts,
                "row": self.row,
            },
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        )

    @classmethod
    def from_json(cls, text: str | bytes, row_key_column: str | None = None) -> "ChangeRecord":
        obj = json.loads(text)
        return cls.from_dict(obj, row_key_column)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any], row_key_column: str | None = None) -> "ChangeRecord":
        try:
            row = obj["row"]
            if not isinstance(row, dict):
                raise TypeError("row is not a map")
            return cls(
                table=obj["table"],
                op=Op(obj["op"]),
                tx_ts=int(obj["tx_ts"]),
                row=row,
                seq=int(obj["seq"]),
                row_key=row.get(row_key_column) if row_key_column else None,
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"bad change record: {exc}") from exc


@dataclass(frozen=True, order=True)
class LogOffset:
    """Position after the last consumed record."""

    segment: int = 0
    seq: int = 0

    def __post_init__(self) -> None:
        if self.seq < 0 or self.segment < 0:
            raise ValueError("offsets are non-negative")


def validate_record(record: ChangeRecord, row_key_column: str) -> None:
    """Raise :class:`LogValidationError` unless ``record`` is well formed."""
    if not isinstance(record.op, Op):
        raise LogValidationError(f"unknown op {record.op!r}")
    if not isinstance(record.tx_ts, int) or isinstance(record.tx_ts, bool) or record.tx_ts < 0:
        raise LogValidationError("tx_ts must be a non-negative integer (ms)")
    if not isinstance(record.row, dict):
        raise LogValidationError("row must be a map")
    for name, value in record.row.items():
        if not isinstance(name, str):
            raise LogValidationError("column names must be strings")
        if value is not None and not isinstance(value, (str, int, float, bool)):
            raise LogValidationError(f"column {name!r} holds a non-scalar value")
        if isinstance(value, float) and not math.isfinite(value):
            raise LogValidationError(f"column {name!r} is not finite")
    if row_key_column not in record.row:
        raise LogValidationError(
            f"{record.op.value} on {record.table!r} lacks row-key column {row_key_column!r}"
        )
    if record.row[row_key_column] is None:
        raise LogValidationError(f"row-key column {row_key_column!r} is null")


def segment_path(directory: Path, segment: int) -> Path:
    return directory / f"{segment:06d}{_SEGMENT_SUFFIX}"


def _read_meta(directory: Path) -> dict[str, Any]:
    path = directory / _META_FILE
    if not path.exists():
        return {"segment_size": DEFAULT_SEGMENT_SIZE}
    return json.loads(path.read_text())


def _last_complete_line(path: Path) -> tuple[bytes | None, int]:
    """Return (last complete line, byte length of the complete prefix)."""
    data = path.read_bytes()
    end = data.rfind(b"\n") + 1
    if end == 0:
        return None, 0
    start = data.rfind(b"\n", 0, end - 1) + 1
    return data[start : end - 1], end


class CdcLogWriter:
    """Single writer for a change log directory.

    ``row_keys`` maps every logged table to its row-key column.  Reopening
    an existing directory continues the sequence; a torn trailing line left
    by a crash is truncated.
    """

    def __init__(
        self,
        directory: str | os.PathLike[str],
        row_keys: Mapping[str, str],
        segment_size: int = DEFAULT_SEGMENT_SIZE,
        fsync: bool = False,
    ) -> None:
        if segment_size < 1:
            raise ValueError("segment_size must be >= 1")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.row_keys = dict(row_keys)
        self.fsync = fsync
        self._lock = threading.Lock()

        meta_path = self.directory / _META_FILE
        if meta_path.exists():
            self.segment_size = int(json.loads(meta_path.read_text())["segment_size"])
        else:
            self.segment_size = segment_size
            meta_path.write_text(json.dumps({"segment_size": segment_size}))

        self._seq = 0
        segments = sorted(self.directory.glob(f"*{_SEGMENT_SUFFIX}"))
        if segments:
            last = segments[-1]
            line, good_len = _last_complete_line(last)
            if good_len != last.stat().st_size:
                with open(last, "r+b") as fh:
                    fh.truncate(good_len)
            if line is not None:
                self._seq = int(json.loads(line)["seq"])
            else:
                self._seq = int(last.stem) * self.segment_size
        self._fh = None
        self._fh_segment = -1

    @property
    def last_seq(self) -> int:
        return self._seq

    def _handle_for(self, seq: int):
        segment = (seq - 1) // self.segment_size
        if segment != self._fh_segment:
            if self._fh is not None:
                self._fh.close()
            self._fh = open(segment_path(self.directory, segment), "ab")
            self._fh_segment = segment
        return self._fh

    def append(self, record: ChangeRecord) -> int:
        """Append ``record`` and return its assigned sequence number."""
        column = self.row_keys.get(record.table)
        if column is None:
            raise LogValidationError(f"table {record.table!r} is not configured")
        validate_record(record, column)
        with self._lock:
            seq = self._seq + 1
            line = ChangeRecord(record.table, record.op, record.tx_ts, record.row, seq).to_json()
            fh = self._handle_for(seq)
            try:
                fh.write(line.encode("utf-8") + b"\n")
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise CdcLogError(f"write failed: {exc}") from exc
            self._seq = seq
            return seq

    def write(self, table: str, op: Op | str, tx_ts: int, row: dict[str, Scalar]) -> int:
        return self.append(ChangeRecord(table, Op(op), tx_ts, row))

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
                self._fh_segment = -1

    def __enter__(self) -> "CdcLogWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


@dataclass
class _Cursor:
    segment: int
    byte_pos: int = 0
    skip_through: int = 0


class LogTailer:
    """Follows one table of a shared change log.

    The tailer opens segment files read-only and keeps no other handles.
    ``read_latency_s`` adds a fixed delay for every ``chunk_lines`` lines
    read, emulating a slow log device in benchmarks.
    """

    def __init__(
        self,
        directory: str | os.PathLike[str],
        table: str,
        row_keys: Mapping[str, str],
        offset: LogOffset | None = None,
        poll_interval: float = DEFAULT_POLL_INTERVAL_S,
        read_latency_s: float = 0.0,
        chunk_lines: int = 1024,
    ) -> None:
        if table not in row_keys:
            raise LogConfigError(f"table {table!r} is not configured")
        self.directory = Path(directory)
        self.table = table
        self.row_key_column = row_keys[table]
        self.poll_interval = poll_interval
        self.read_latency_s = read_latency_s
        self.chunk_lines = chunk_lines
        self.segment_size = int(_read_meta(self.directory)["segment_size"])
        self.scanned = 0
        start = offset or LogOffset()
        self._offset = start
        self._cursor = _Cursor(segment=start.segment, skip_through=start.seq)

    @property
    def offset(self) -> LogOffset:
        return self._offset

    def _segment_full(self, segment: int) -> bool:
        return self._offset.seq >= (segment + 1) * self.segment_size

    def poll(self, max_records: int | None = None) -> list[ChangeRecord]:
        """Return this table's records that became available since the last call.

        Never blocks.  An empty list means the tailer is caught up.
        """
        out: list[ChangeRecord] = []
        lines_in_chunk = 0
        while max_records is None or len(out) < max_records:
            cur = self._cursor
            path = segment_path(self.directory, cur.segment)
            if not path.exists():
                break
            progressed = False
            with open(path, "rb") as fh:
                fh.seek(cur.byte_pos)
                while max_records is None or len(out) < max_records:
                    line = fh.readline()
                    if not line or not line.endswith(b"\n"):
                        break
                    pos = cur.byte_pos
                    cur.byte_pos += len(line)
                    progressed = True
                    try:
                        record = ChangeRecord.from_json(line, self.row_key_column)
                    except ValueError as exc:
                        raise LogDecodeError(cur.segment, pos, str(exc)) from None
                    if record.seq <= cur.skip_through:
                        continue
                    self.scanned += 1
                    self._offset = LogOffset(cur.segment, record.seq)
                    if record.table == self.table:
                        out.append(record)
                    lines_in_chunk += 1
                    if lines_in_chunk >= self.chunk_lines:
                        lines_in_chunk = 0
                        if self.read_latency_s:
                            time.sleep(self.read_latency_s)
            if self._segment_full(cur.segment):
                self._cursor = _Cursor(segment=cur.segment + 1, skip_through=self._offset.seq)
                continue
            if not progressed:
                break
        if lines_in_chunk and self.read_latency_s:
            time.sleep(self.read_latency_s)
        return out

    def __iter__(self) -> Iterator[ChangeRecord]:
        """Drain everything currently in the log (non-blocking)."""
        while True:
            batch = self.poll(self.chunk_lines)
            if not batch:
                return
            yield from batch

    def follow(self, stop: threading.Event, max_records: int = 1024) -> Iterator[ChangeRecord]:
        """Yield records as they are appended until ``stop`` is set."""
        while not stop.is_set():
            batch = self.poll(max_records)
            if not batch:
                stop.wait(self.poll_interval)
                continue
            yield from batch

    def checkpoint(self, path: str | os.PathLike[str], offset: LogOffset | None = None) -> None:
        save_checkpoint(path, offset or self._offset)


def tail(
    directory: str | os.PathLike[str],
    table: str,
    row_keys: Mapping[str, str],
    start: LogOffset | None = None,
) -> tuple[list[ChangeRecord], LogOffset]:
    """Read all available records of ``table`` after ``start``."""
    tailer = LogTailer(directory, table, row_keys, start)
    records = list(tailer)
    return records, tailer.offset


def read_log(directory: str | os.PathLike[str], row_keys: Mapping[str, str] | None = None) -> Iterator[ChangeRecord]:
    """Yield every record of the log in sequence order."""
    row_keys = row_keys or {}
    directory = Path(directory)
    for path in sorted(directory.glob(f"*{_SEGMENT_SUFFIX}")):
        segment = int(path.stem)
        pos = 0
        with open(path, "rb") as fh:
            for line in fh:
                if not line.endswith(b"\n"):
                    break
                try:
                    obj = json.loads(line)
                    record = ChangeRecord.from_dict(obj, row_keys.get(obj.get("table")))
                except ValueError as exc:
                    raise LogDecodeError(segment, pos, str(exc)) from None
                pos += len(line)
                yield record


def save_checkpoint(path: str | os.PathLike[str], offset: LogOffset) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(f"{offset.segment} {offset.seq}\n")
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike[str]) -> LogOffset:
    """Offset stored at ``path``, or the zero offset when there is none."""
    path = Path(path)
    if not path.exists():
        return LogOffset()
    segment, seq = path.read_text().split()
    return LogOffset(int(segment), int(seq))


@dataclass
class LogStats:
    records: int = 0
    per_table: dict[str, int] = field(default_factory=dict)


def log_stats(directory: str | os.PathLike[str]) -> LogStats:
    stats = LogStats()
    for record in read_log(directory):
        stats.records += 1
        stats.per_table[record.table] = stats.per_table.get(record.table, 0) + 1
    return stats
