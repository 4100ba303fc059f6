"""Fact-grain splitting and OEE indicators for one equipment unit.

Equipment status, production runs and quality inspections are cut at
every interval endpoint so that each resulting grain has one status and
at most one production run.  Grains are then scored:

* availability: ON time of the grain over the planned time of its window
* performance: produced parts over the parts the theoretical rate allows
* quality: good parts over inspected parts
* OEE: availability x performance x quality

Times are integer milliseconds.  Theoretical rates are parts per hour.
Undefined indicators are ``None`` rather than 0.
"""

from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

MS_PER_HOUR = 3_600_000


class OeeError(ValueError):
    pass


class Status(str, Enum):
    ON = "ON"
    OFF = "OFF"


class GrainKind(str, Enum):
    OFF = "OFF"
    ON_IDLE = "ON_IDLE"
    ON_PRODUCING = "ON_PRODUCING"


@dataclass(frozen=True)
class StatusInterval:
    equip: str
    status: Status
    start_ts: int
    end_ts: int | None = None  # None: still open


@dataclass(frozen=True)
class ProductionInterval:
    equip: str
    start_ts: int
    end_ts: int
    qty: float
    theoretical_rate: float

    def __post_init__(self) -> None:
        if self.end_ts <= self.start_ts:
            raise OeeError(f"production interval [{self.start_ts}, {self.end_ts}) is empty")
        if self.qty < 0:
            raise OeeError("qty_produced must be >= 0")
        if self.theoretical_rate <= 0:
            raise OeeError("theoretical_rate must be > 0")


@dataclass(frozen=True)
class QualityRecord:
    equip: str
    ts: int
    good: int
    defect: int

    def __post_init__(self) -> None:
        if self.good < 0 or self.defect < 0:
            raise OeeError("quality counts must be >= 0")


@dataclass(frozen=True)
class FactGrain:
    equip: str
    start_ts: int
    end_ts: int
    kind: GrainKind
    qty: float = 0.0
    good: int = 0
    defect: int = 0
    capacity: float = 0.0  # parts the theoretical rate allows over the grain
    availability: float | None = None
    performance: float | None = None
    quality: float | None = None
    oee: float | None = None

    @property
    def duration(self) -> int:
        return self.end_ts - self.start_ts


@dataclass(frozen=True)
class WindowSummary:
    equip: str
    start_ts: int
    end_ts: int
    uptime_ms: int
    qty: float
    good: int
    defect: int
    capacity: float
    availability: float | None
    performance: float | None
    quality: float | None
    oee: float | None


def status_intervals_from_changes(equip: str, changes: Iterable[tuple[int, Status | str]]) -> list[StatusInterval]:
    """Turn ``(start_ts, status)`` change events into contiguous intervals.

    Each interval ends where the next change starts; the last stays open.
    """
    ordered = sorted((int(ts), Status(s)) for ts, s in changes)
    out = []
    for i, (ts, status) in enumerate(ordered):
        end = ordered[i + 1][0] if i + 1 < len(ordered) else None
        if end is not None and end <= ts:
            continue
        out.append(StatusInterval(equip, status, ts, end))
    return out


def _clip(start: int, end: int | None, t0: int, t1: int) -> tuple[int, int] | None:
    a = max(start, t0)
    b = t1 if end is None else min(end, t1)
    return (a, b) if a < b else None


def split(
    status: Sequence[StatusInterval],
    production: Sequence[ProductionInterval],
    quality: Sequence[QualityRecord],
    window: tuple[int, int],
    diagnostics: Counter | None = None,
) -> list[FactGrain]:
    """Cut status x production x quality into fact grains inside ``window``.

    Grain boundaries are the distinct endpoints of the clipped status and
    production intervals, so grains tile ``[min endpoint, max endpoint)``.
    Stretches with no status are scored as OFF (counted as
    ``status_gap_ms``).  A run's quantity is spread over its grains in
    proportion to overlap with the full, unclipped run.  Each quality
    record lands in the grain containing its timestamp.
    """
    t0, t1 = window
    if t1 <= t0:
        raise OeeError(f"empty window [{t0}, {t1})")
    diag = diagnostics if diagnostics is not None else Counter()

    st: list[tuple[int, int, Status]] = []
    for s in status:
        c = _clip(s.start_ts, s.end_ts, t0, t1)
        if c is not None:
            st.append((c[0], c[1], Status(s.status)))
    st.sort(key=lambda x: x[0])
    for (a0, b0, _), (a1, _b1, _) in zip(st, st[1:]):
        if a1 < b0:
            raise OeeError(f"overlapping status intervals at {a1}")

    runs = sorted(production, key=lambda p: p.start_ts)
    for p0, p1 in zip(runs, runs[1:]):
        if p1.start_ts < p0.end_ts:
            raise OeeError(f"overlapping production intervals for {p1.equip} at {p1.start_ts}")
    pr: list[tuple[int, int, ProductionInterval]] = []
    for p in runs:
        c = _clip(p.start_ts, p.end_ts, t0, t1)
        if c is not None:
            pr.append((c[0], c[1], p))

    points = {a for a, _, _ in st} | {b for _, b, _ in st} | {a for a, _, _ in pr} | {b for _, b, _ in pr}
    if not points:
        return []
    bounds = sorted(points)
    equip = (status[0].equip if status else production[0].equip)

    grains_raw: list[list] = []
    si = pi = 0
    for a, b in zip(bounds, bounds[1:]):
        while si < len(st) and st[si][1] <= a:
            si += 1
        while pi < len(pr) and pr[pi][1] <= a:
            pi += 1
        state = st[si][2] if si < len(st) and st[si][0] <= a else None
        run = pr[pi][2] if pi < len(pr) and pr[pi][0] <= a else None
        if state is None:
            diag["status_gap_ms"] += b - a
        if state is Status.ON:
            kind = GrainKind.ON_PRODUCING if run is not None else GrainKind.ON_IDLE
        else:
            kind = GrainKind.OFF
            if run is not None:
                diag["production_while_off"] += 1
        qty = capacity = 0.0
        if run is not None:
            qty = run.qty * (b - a) / (run.end_ts - run.start_ts)
            capacity = run.theoretical_rate * (b - a) / MS_PER_HOUR
        grains_raw.append([a, b, kind, qty, 0, 0, capacity])

    starts = [g[0] for g in grains_raw]
    for q in quality:
        i = bisect.bisect_right(starts, q.ts) - 1
        if i < 0 or q.ts >= grains_raw[i][1]:
            diag["quality_unattributed"] += 1
            continue
        grains_raw[i][4] += q.good
        grains_raw[i][5] += q.defect

    return [FactGrain(equip, a, b, kind, qty, good, defect, cap) for a, b, kind, qty, good, defect, cap in grains_raw]


def kpis(grain: FactGrain, planned_time_ms: int, diagnostics: Counter | None = None) -> FactGrain:
    """Return ``grain`` with availability, performance, quality and OEE set."""
    if planned_time_ms <= 0:
        raise OeeError("planned_time_ms must be > 0")
    duration = grain.end_ts - grain.start_ts
    if duration <= 0:
        raise OeeError(f"zero-duration grain at {grain.start_ts}")
    availability = 0.0 if grain.kind is GrainKind.OFF else duration / planned_time_ms
    performance = None
    if grain.kind is GrainKind.ON_PRODUCING and grain.capacity > 0:
        performance = grain.qty / grain.capacity
        if performance > 1.0:
            if diagnostics is not None:
                diagnostics["performance_clamped"] += 1
            performance = 1.0
    inspected = grain.good + grain.defect
    quality = grain.good / inspected if inspected > 0 else None
    oee = None
    if performance is not None and quality is not None:
        oee = availability * performance * quality
    return replace(grain, availability=availability, performance=performance, quality=quality, oee=oee)


def window_start(ts: int, window_ms: int) -> int:
    return ts - ts % window_ms


def split_windows(
    status: Sequence[StatusInterval],
    production: Sequence[ProductionInterval],
    quality: Sequence[QualityRecord],
    span: tuple[int, int],
    window_ms: int,
    diagnostics: Counter | None = None,
) -> list[FactGrain]:
    """Split and score ``span``, cutting it at evaluation-window boundaries.

    Every grain is scored against the full window length as planned time.
    """
    lo, hi = span
    out: list[FactGrain] = []
    w = window_start(lo, window_ms)
    if diagnostics is not None:
        diagnostics["quality_unattributed"] += sum(1 for q in quality if not lo <= q.ts < hi)
    while w < hi:
        piece = (max(lo, w), min(hi, w + window_ms))
        in_piece = [q for q in quality if piece[0] <= q.ts < piece[1]]
        for g in split(status, production, in_piece, piece, diagnostics):
            out.append(kpis(g, window_ms, diagnostics))
        w += window_ms
    return out


def aggregate(grains: Sequence[FactGrain], window: tuple[int, int], equip: str | None = None) -> WindowSummary:
    """Window-level indicators pooled from grain numerators and denominators."""
    t0, t1 = window
    planned = t1 - t0
    if planned <= 0:
        raise OeeError("empty window")
    if not grains:
        return WindowSummary(equip or "", t0, t1, 0, 0.0, 0, 0, 0.0, None, None, None, None)
    ordered = sorted(grains, key=lambda g: (g.start_ts, g.end_ts))
    uptime = sum(g.duration for g in ordered if g.kind is not GrainKind.OFF)
    qty = sum(g.qty for g in ordered)
    good = sum(g.good for g in ordered)
    defect = sum(g.defect for g in ordered)
    producing = [g for g in ordered if g.kind is GrainKind.ON_PRODUCING and g.capacity > 0]
    capacity = sum(g.capacity for g in producing)
    availability = uptime / planned
    performance = None
    if capacity > 0:
        effective = sum(min(g.qty, g.capacity) for g in producing)
        performance = effective / capacity
    quality = good / (good + defect) if good + defect > 0 else None
    oee = None
    if performance is not None and quality is not None:
        oee = availability * performance * quality
    return WindowSummary(
        equip or ordered[0].equip, t0, t1, uptime, qty, good, defect, capacity,
        availability, performance, quality, oee,
    )
