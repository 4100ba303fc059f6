"""Run metrics: sampled throughput gauges and summary figures.

Gauges are sliding one-second windows over monotone counters, sampled by
a single harness thread.  Counters are owned by the workers and pumps and
only read here.
"""

from __future__ import annotations

import csv
import io
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

CSV_COLUMNS = ("timestamp_ms", "stage", "worker_id", "records_per_s", "buffered", "dead_letters")


@dataclass(frozen=True)
class Sample:
    timestamp_ms: int
    stage: str
    worker_id: str
    records_per_s: float
    buffered: int
    dead_letters: int


@dataclass
class RunMetrics:
    samples: list[Sample] = field(default_factory=list)
    total_runtime_s: float = 0.0
    processing_s: float = 0.0
    operational_records: int = 0
    throughput: float = 0.0
    bootstrap_ms: list[float] = field(default_factory=list)
    buffer_peak: int = 0
    buffered_total: int = 0
    reprocessed: int = 0
    duplicates_skipped: int = 0
    duplicates_published: int = 0
    dead_letters: int = 0
    pre_kill_rate: float | None = None
    post_kill_rate: float | None = None
    kills: list[tuple[str, float]] = field(default_factory=list)
    diagnostics: dict[str, int] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        return {
            "operational_records": self.operational_records,
            "processing_s": round(self.processing_s, 4),
            "total_runtime_s": round(self.total_runtime_s, 4),
            "throughput_rps": round(self.throughput, 2),
            "buffer_peak": self.buffer_peak,
            "buffered_total": self.buffered_total,
            "reprocessed": self.reprocessed,
            "duplicates_skipped": self.duplicates_skipped,
            "duplicates_published": self.duplicates_published,
            "dead_letters": self.dead_letters,
            "bootstrap_ms_max": round(max(self.bootstrap_ms), 3) if self.bootstrap_ms else None,
            "pre_kill_rps": None if self.pre_kill_rate is None else round(self.pre_kill_rate, 2),
            "post_kill_rps": None if self.post_kill_rate is None else round(self.post_kill_rate, 2),
            "kills": [list(k) for k in self.kills],
            "diagnostics": dict(self.diagnostics),
        }


def write_csv(
    path: str | os.PathLike[str] | None,
    header: dict[str, Any],
    columns: Iterable[str],
    rows: Iterable[Iterable[Any]],
) -> str:
    """CSV text preceded by ``# key: value`` reproducibility lines."""
    buf = io.StringIO()
    for key in sorted(header):
        buf.write(f"# {key}: {json.dumps(header[key])}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(columns))
    for row in rows:
        writer.writerow(list(row))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_csv(path: str | os.PathLike[str]) -> tuple[dict[str, Any], list[dict[str, str]]]:
    header: dict[str, Any] = {}
    body = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            header[key] = json.loads(value)
        else:
            body.append(line)
    return header, list(csv.DictReader(body))


def samples_csv(path: str | os.PathLike[str] | None, header: dict[str, Any], samples: Iterable[Sample]) -> str:
    rows = (
        (s.timestamp_ms, s.stage, s.worker_id, f"{s.records_per_s:.3f}", s.buffered, s.dead_letters) for s in samples
    )
    return write_csv(path, header, CSV_COLUMNS, rows)


Probe = Callable[[], tuple[int, int, int]]  # (counter, buffered, dead_letters)


class Sampler:
    """Periodically turns counters into one-second-window rates."""

    def __init__(self, interval_s: float = 0.25, window_s: float = 1.0) -> None:
        self.interval_s = interval_s
        self.window_s = window_s
        self.samples: list[Sample] = []
        self._probes: dict[tuple[str, str], Probe] = {}
        self._history: dict[tuple[str, str], deque[tuple[float, int]]] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._t0 = time.monotonic()

    def add(self, stage: str, worker_id: str, probe: Probe) -> None:
        self._probes[(stage, worker_id)] = probe
        self._history[(stage, worker_id)] = deque()

    def sample_once(self) -> None:
        now = time.monotonic()
        for key, probe in list(self._probes.items()):
            count, buffered, dead = probe()
            hist = self._history[key]
            hist.append((now, count))
            while len(hist) > 1 and now - hist[0][0] > self.window_s:
                hist.popleft()
            t_first, c_first = hist[0]
            rate = (count - c_first) / (now - t_first) if now > t_first else 0.0
            self.samples.append(Sample(int((now - self._t0) * 1000), key[0], key[1], rate, buffered, dead))

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_s):
            self.sample_once()

    def start(self) -> None:
        self._t0 = time.monotonic()
        self._thread = threading.Thread(target=self._loop, name="sampler", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.sample_once()
