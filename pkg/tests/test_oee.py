from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ondemand_etl.oee import (
    FactGrain,
    GrainKind,
    OeeError,
    ProductionInterval,
    QualityRecord,
    Status,
    StatusInterval,
    aggregate,
    kpis,
    split,
    split_windows,
    status_intervals_from_changes,
)

MIN = 60_000
HOUR = 3_600_000


def approx(x):
    return pytest.approx(x, rel=1e-12, abs=0)


def test_off_on_with_production_in_the_middle():
    status = [StatusInterval("E1", Status.OFF, 0, 100), StatusInterval("E1", Status.ON, 100, 200)]
    prod = [ProductionInterval("E1", 120, 180, 6, 1.0)]
    grains = split(status, prod, [], (0, 200))
    assert [(g.start_ts, g.end_ts, g.kind) for g in grains] == [
        (0, 100, GrainKind.OFF),
        (100, 120, GrainKind.ON_IDLE),
        (120, 180, GrainKind.ON_PRODUCING),
        (180, 200, GrainKind.ON_IDLE),
    ]
    assert grains[2].qty == 6


def test_idle_window_is_one_grain():
    grains = split([StatusInterval("E1", Status.ON, 0)], [], [], (0, HOUR))
    assert [(g.start_ts, g.end_ts, g.kind) for g in grains] == [(0, HOUR, GrainKind.ON_IDLE)]


def test_perfect_production():
    g = FactGrain("E1", 0, HOUR, GrainKind.ON_PRODUCING, qty=100.0, good=100, capacity=100.0)
    s = kpis(g, HOUR)
    assert (s.availability, s.performance, s.quality, s.oee) == (1.0, 1.0, 1.0, 1.0)


def test_off_grain_scores():
    s = kpis(FactGrain("E1", 0, 10 * MIN, GrainKind.OFF), HOUR)
    assert s.availability == 0.0
    assert s.performance is None and s.quality is None and s.oee is None


def test_hand_case_single_grain():
    # 80 of 100 planned minutes ON, 40 parts where 60 were possible, 36 good of 40
    g = FactGrain("E1", 0, 80 * MIN, GrainKind.ON_PRODUCING, qty=40.0, good=36, defect=4, capacity=60.0)
    s = kpis(g, 100 * MIN)
    assert s.availability == approx(0.8)
    assert s.performance == approx(40 / 60)
    assert s.quality == approx(0.9)
    assert s.oee == approx(0.48)


def test_hand_case_from_raw_intervals():
    status = status_intervals_from_changes("E1", [(0, "ON"), (80 * MIN, "OFF")])
    rate = 60 / (80 / 60)  # 60 parts per 80 minutes, in parts per hour
    prod = [ProductionInterval("E1", 0, 80 * MIN, 40.0, rate)]
    quality = [QualityRecord("E1", 10 * MIN, 36, 4)]
    grains = [kpis(g, 100 * MIN) for g in split(status, prod, quality, (0, 100 * MIN))]
    s = aggregate(grains, (0, 100 * MIN), "E1")
    assert s.availability == approx(0.8)
    assert s.performance == approx(2 / 3)
    assert s.quality == approx(0.9)
    assert s.oee == approx(0.48)


def test_overproduction_is_clamped():
    diag = Counter()
    g = FactGrain("E1", 0, MIN, GrainKind.ON_PRODUCING, qty=12.0, capacity=10.0)
    assert kpis(g, HOUR, diag).performance == 1.0
    assert diag["performance_clamped"] == 1


def test_kpis_rejects_bad_input():
    with pytest.raises(OeeError):
        kpis(FactGrain("E1", 0, 10, GrainKind.OFF), 0)
    with pytest.raises(OeeError):
        kpis(FactGrain("E1", 10, 10, GrainKind.OFF), 100)


def test_interval_validation():
    with pytest.raises(OeeError):
        ProductionInterval("E1", 10, 10, 1, 1)
    with pytest.raises(OeeError):
        ProductionInterval("E1", 0, 10, -1, 1)
    with pytest.raises(OeeError):
        ProductionInterval("E1", 0, 10, 1, 0)
    with pytest.raises(OeeError):
        QualityRecord("E1", 0, -1, 0)


def test_overlaps_rejected():
    with pytest.raises(OeeError):
        split([StatusInterval("E1", Status.ON, 0, 50), StatusInterval("E1", Status.OFF, 40, 90)], [], [], (0, 100))
    runs = [ProductionInterval("E1", 0, 50, 1, 1), ProductionInterval("E1", 40, 60, 1, 1)]
    with pytest.raises(OeeError):
        split([StatusInterval("E1", Status.ON, 0)], runs, [], (0, 100))


def test_gap_and_off_production_are_diagnosed():
    diag = Counter()
    status = [StatusInterval("E1", Status.ON, 0, 40), StatusInterval("E1", Status.OFF, 60, 100)]
    prod = [ProductionInterval("E1", 70, 80, 1, 1)]
    quality = [QualityRecord("E1", 500, 1, 0)]
    grains = split(status, prod, quality, (0, 100), diag)
    assert diag["status_gap_ms"] == 20
    assert diag["production_while_off"] == 1
    assert diag["quality_unattributed"] == 1
    assert [g.kind for g in grains if g.start_ts == 40] == [GrainKind.OFF]


def test_split_windows_cuts_at_window_edges():
    status = [StatusInterval("E1", Status.ON, 0)]
    prod = [ProductionInterval("E1", 30 * MIN, 90 * MIN, 60.0, 60.0)]
    quality = [QualityRecord("E1", 70 * MIN, 5, 1)]
    diag = Counter()
    grains = split_windows(status, prod, quality, (0, 2 * HOUR), HOUR, diag)
    edges = [(g.start_ts, g.end_ts) for g in grains]
    assert edges == [(0, 30 * MIN), (30 * MIN, HOUR), (HOUR, 90 * MIN), (90 * MIN, 2 * HOUR)]
    assert [g.qty for g in grains] == [0.0, 30.0, 30.0, 0.0]
    assert grains[2].good == 5 and diag["quality_unattributed"] == 0
    assert all(g.availability == (g.end_ts - g.start_ts) / HOUR for g in grains)


def test_aggregate_pools_numerators():
    a = FactGrain("E1", 0, 30 * MIN, GrainKind.ON_PRODUCING, qty=5.0, capacity=10.0)
    b = FactGrain("E1", 30 * MIN, HOUR, GrainKind.ON_PRODUCING, qty=10.0, capacity=10.0)
    s = aggregate([kpis(a, HOUR), kpis(b, HOUR)], (0, HOUR))
    assert s.performance == approx(0.75)
    assert s.availability == 1.0 and s.quality is None and s.oee is None


def test_aggregate_single_grain_equals_grain():
    g = kpis(FactGrain("E1", 0, HOUR, GrainKind.ON_PRODUCING, qty=5.0, good=4, defect=1, capacity=10.0), HOUR)
    s = aggregate([g], (0, HOUR))
    assert (s.availability, s.performance, s.quality, s.oee) == (g.availability, g.performance, g.quality, g.oee)


def test_aggregate_empty():
    s = aggregate([], (0, HOUR), "E1")
    assert s.uptime_ms == 0 and s.oee is None


# -- property tests against a 1 ms point-sampling oracle -----------------------------------

WINDOW = 240


@st.composite
def interval_sets(draw):
    cuts = sorted(draw(st.sets(st.integers(0, WINDOW - 1), min_size=1, max_size=8)))
    changes = [(c, draw(st.sampled_from(["ON", "OFF"]))) for c in cuts]
    edges = sorted(draw(st.sets(st.integers(0, WINDOW + 40), max_size=8)))
    runs = []
    for a, b in zip(edges[::2], edges[1::2]):
        if draw(st.booleans()):
            runs.append(ProductionInterval("E1", a, b, float(draw(st.integers(0, 50))), float(draw(st.integers(1, 9)))))
    quality = [QualityRecord("E1", draw(st.integers(0, WINDOW - 1)), draw(st.integers(0, 5)), draw(st.integers(0, 5)))
               for _ in range(draw(st.integers(0, 3)))]
    return status_intervals_from_changes("E1", changes), runs, quality


def _sample(status, runs):
    t = np.arange(WINDOW)
    state = np.full(WINDOW, "", dtype=object)
    for s in status:
        end = WINDOW if s.end_ts is None else s.end_ts
        state[(t >= s.start_ts) & (t < end)] = s.status.value
    run_at = np.full(WINDOW, -1)
    for i, r in enumerate(runs):
        run_at[(t >= r.start_ts) & (t < r.end_ts)] = i
    return state, run_at


@settings(max_examples=1000, deadline=None)
@given(interval_sets())
def test_tiling_matches_point_sampling(data):
    status, runs, quality = data
    grains = split(status, runs, quality, (0, WINDOW))
    state, run_at = _sample(status, runs)
    covered = np.zeros(WINDOW, dtype=int)
    for g in grains:
        covered[g.start_ts:g.end_ts] += 1
        for ms in range(g.start_ts, g.end_ts):
            on, producing = state[ms] == "ON", run_at[ms] >= 0
            expected = GrainKind.ON_PRODUCING if on and producing else GrainKind.ON_IDLE if on else GrainKind.OFF
            assert g.kind is expected, ms
    assert covered.max(initial=0) <= 1  # overlap-free
    if grains:
        lo, hi = grains[0].start_ts, grains[-1].end_ts
        assert covered[lo:hi].min() == 1  # gapless between first and last edge
        assert all(a.end_ts == b.start_ts for a, b in zip(grains, grains[1:]))
    qty_in = sum(r.qty * (min(r.end_ts, WINDOW) - r.start_ts) / (r.end_ts - r.start_ts)
                 for r in runs if r.start_ts < WINDOW)
    assert sum(g.qty for g in grains) == pytest.approx(qty_in, rel=1e-9, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(interval_sets())
def test_aggregate_matches_raw_recomputation(data):
    status, runs, quality = data
    planned = WINDOW
    grains = [kpis(g, planned) for g in split(status, runs, quality, (0, WINDOW))]
    s = aggregate(grains, (0, WINDOW), "E1")
    state, run_at = _sample(status, runs)
    uptime = qty = cap = eff = 0.0
    for ms in range(WINDOW):
        on = state[ms] == "ON"
        uptime += on
        if run_at[ms] >= 0:
            r = runs[run_at[ms]]
            q, c = r.qty / (r.end_ts - r.start_ts), r.theoretical_rate / HOUR
            qty += q
            if on:
                cap += c
                eff += min(q, c)
    if not grains:
        return
    lo, hi = grains[0].start_ts, grains[-1].end_ts
    good = sum(q.good for q in quality if lo <= q.ts < hi)
    defect = sum(q.defect for q in quality if lo <= q.ts < hi)
    assert s.uptime_ms == uptime
    assert s.availability == pytest.approx(uptime / planned, rel=1e-9)
    assert s.qty == pytest.approx(qty, rel=1e-9, abs=1e-12)
    assert (s.good, s.defect) == (good, defect)
    if cap > 0:
        assert s.performance == pytest.approx(eff / cap, rel=1e-9)
    else:
        assert s.performance is None
