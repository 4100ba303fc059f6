"""Source table store: the operational database the change log describes.

The workload generator applies every change here as well as to the log.
Only the look-back baseline reads it, through one shared connection with
a fixed per-query latency, the way a transform without a local cache
would query the source system.
"""

from __future__ import annotations

import json
import os
import sqlite3
import threading
import time
from typing import Mapping

from .cdc_log import ChangeRecord, Op
from .producer import canonical_key

_SCHEMA = """
CREATE TABLE IF NOT EXISTS source_rows (
    tbl TEXT NOT NULL,
    row_key TEXT NOT NULL,
    tx_ts INTEGER NOT NULL,
    data TEXT NOT NULL,
    PRIMARY KEY (tbl, row_key)
)
"""


class SourceStore:
    def __init__(
        self,
        path: str | os.PathLike[str],
        row_keys: Mapping[str, str],
        query_latency_s: float = 0.0,
    ) -> None:
        self.path = str(path)
        self.row_keys = dict(row_keys)
        self.query_latency_s = query_latency_s
        self.queries = 0
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.execute(_SCHEMA)
        self._conn.commit()
        self.version = 0

    def apply(self, record: ChangeRecord) -> None:
        key = canonical_key(record.row[self.row_keys[record.table]])
        with self._lock:
            if record.op is Op.DELETE:
                self._conn.execute("DELETE FROM source_rows WHERE tbl=? AND row_key=?", (record.table, key))
            else:
                self._conn.execute(
                    "INSERT OR REPLACE INTO source_rows VALUES (?, ?, ?, ?)",
                    (record.table, key, record.tx_ts, json.dumps(record.row, separators=(",", ":"))),
                )
            self.version += 1

    def commit(self) -> None:
        with self._lock:
            self._conn.commit()

    def _query(self, sql: str, params: tuple) -> list[tuple]:
        with self._lock:
            if self.query_latency_s:
                time.sleep(self.query_latency_s)
            self.queries += 1
            return self._conn.execute(sql, params).fetchall()

    def get(self, table: str, row_key: str) -> dict | None:
        rows = self._query("SELECT data FROM source_rows WHERE tbl=? AND row_key=?", (table, row_key))
        return json.loads(rows[0][0]) if rows else None

    def get_many(self, table: str, row_keys: list[str]) -> dict[str, dict]:
        if not row_keys:
            return {}
        marks = ",".join("?" * len(row_keys))
        rows = self._query(
            f"SELECT row_key, data FROM source_rows WHERE tbl=? AND row_key IN ({marks})", (table, *row_keys)
        )
        return {k: json.loads(d) for k, d in rows}

    def high_water(self) -> int:
        rows = self._query("SELECT COALESCE(MAX(tx_ts), 0) FROM source_rows", ())
        return int(rows[0][0])

    def count(self, table: str | None = None) -> int:
        if table is None:
            return int(self._query("SELECT COUNT(*) FROM source_rows", ())[0][0])
        return int(self._query("SELECT COUNT(*) FROM source_rows WHERE tbl=?", (table,))[0][0])

    def close(self) -> None:
        with self._lock:
            self._conn.commit()
            self._conn.close()
