"""Synthetic steelworks workload and the batch oracle.

The generator simulates every equipment unit as a sequence of production
runs separated by idle gaps.  Some gaps include an OFF period.  It writes
status changes, runs and quality inspections to a change log in
transaction-time order.  Every run names the master rows it depends on.
With ``late_master_fraction`` > 0 a share of those master rows is
committed after the first run that needs them.

Each unit's timeline ends with an OFF status change dated after
everything else of that unit.  That change raises the high-water mark
of the owning worker's cache past every buffered run, so the late buffer
always drains.

:func:`oracle` recomputes the expected fact dump from the log alone: it
replays the log into full tables, joins them in batch and scores each
equipment's whole covered timeline at once.  It shares only the
:mod:`oee` scoring code with the streaming path.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .cdc_log import ChangeRecord, CdcLogWriter, Op, read_log
from .oee import ProductionInterval, QualityRecord, Status, status_intervals_from_changes, split_windows
from .producer import canonical_key
from .source_store import SourceStore
from .steelworks import Preset, event_key, model_for
from .uploader import format_dump, rows_from_grains, window_summaries

MINUTE = 60_000
HOUR = 60 * MINUTE
DEFAULT_START_TS = 472_222 * HOUR  # 2023-11-14T22:00:00Z, hour aligned
DEFAULT_WINDOW_MS = HOUR


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    equipment_count: int = 20
    records_per_table: int = 2_000
    schema_preset: Preset = Preset.SIMPLE
    seed: int = 0
    late_master_fraction: float = 0.0
    duplicate_fraction: float = 0.0
    late_delay_max_ms: int = 20 * MINUTE
    start_ts: int = DEFAULT_START_TS

    def __post_init__(self) -> None:
        object.__setattr__(self, "schema_preset", Preset(self.schema_preset))
        if self.equipment_count < 1:
            raise WorkloadError("equipment_count must be >= 1")
        if self.records_per_table < 0:
            raise WorkloadError("records_per_table must be >= 0")
        for name in ("late_master_fraction", "duplicate_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise WorkloadError(f"{name} must be in [0, 1]")
        if self.late_delay_max_ms < 1:
            raise WorkloadError("late_delay_max_ms must be >= 1")


@dataclass
class Manifest:
    preset: str
    seed: int
    equipment_count: int
    records_per_table: int
    counts: dict[str, int]
    keys: list[str]
    operational_table: str
    late_rows: int
    total: int
    spec: dict[str, Any] = field(default_factory=dict)

    def save(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "Manifest":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class _Row:
    table: str
    tx_ts: int
    row: dict[str, Any]
    ref: tuple[str, str] | None = None  # (table, row key) when other rows may depend on it
    deps: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class _Run:
    period_start: int
    start: int
    end: int
    seq_from: int
    seq_to: int
    quality_ts: int


def equipment_keys(n: int) -> list[str]:
    return [f"E{i}" for i in range(1, n + 1)]


def _runs_per_equipment(spec: WorkloadSpec) -> list[int]:
    base, extra = divmod(spec.records_per_table, spec.equipment_count)
    return [base + (1 if i < extra else 0) for i in range(spec.equipment_count)]


def _timeline(rng: np.random.Generator, t0: int, n_runs: int, delay_pad: int):
    """Status change events and runs for one unit.

    Events are ``(ts, status, flavour)`` with flavour in
    {"start", "off", "back", "run", "end"}.
    """
    events: list[tuple[int, Status, str]] = [(t0, Status.ON, "start")]
    runs: list[_Run] = []
    prev_end = t0
    for _ in range(n_runs):
        gap = int(rng.integers(2 * MINUTE, 30 * MINUTE))
        if gap >= 6 * MINUTE and rng.random() < 0.4:
            off_at = prev_end + int(rng.integers(0, gap // 3))
            back_at = off_at + int(rng.integers(MINUTE, max(MINUTE + 1, prev_end + gap - off_at - MINUTE)))
            if prev_end <= off_at < back_at < prev_end + gap and off_at > events[-1][0]:
                events.append((off_at, Status.OFF, "off"))
                events.append((back_at, Status.ON, "back"))
        start = prev_end + gap
        if rng.random() < 0.3 and start > events[-1][0]:
            events.append((start, Status.ON, "run"))
        end = start + int(rng.integers(5 * MINUTE, 45 * MINUTE))
        starts = [e[0] for e in events]
        seq_from = int(np.searchsorted(starts, prev_end, side="right"))  # 1-based seq in effect
        seq_to = int(np.searchsorted(starts, end - 1, side="right"))
        runs.append(_Run(prev_end, start, end, seq_from, seq_to, start + int(rng.integers(0, end - start))))
        prev_end = end
    horizon = prev_end + delay_pad + int(rng.integers(MINUTE, 10 * MINUTE))
    events.append((horizon, Status.OFF, "end"))
    return events, runs


def _simple_rows(spec: WorkloadSpec, rng: np.random.Generator) -> list[_Row]:
    rows: list[_Row] = []
    prod_id = quality_id = 0
    for equip, n_runs in zip(equipment_keys(spec.equipment_count), _runs_per_equipment(spec)):
        rate = round(float(rng.uniform(60.0, 600.0)), 1)
        defect_p = float(rng.uniform(0.0, 0.1))
        events, runs = _timeline(rng, spec.start_ts, n_runs, spec.late_delay_max_ms)
        for seq, (ts, status, flavour) in enumerate(events, 1):
            key = event_key(equip, seq)
            rows.append(
                _Row(
                    "equipment_status", ts,
                    {"status_id": key, "equip_id": equip, "seq_no": seq, "status": status.value, "start_ts": ts},
                    ref=None if flavour == "end" else ("equipment_status", key),
                )
            )
        for run in runs:
            prod_id += 1
            quality_id += 1
            dur = run.end - run.start
            qty = int(round(rate * dur / HOUR * float(rng.uniform(0.55, 1.05))))
            defect = int(rng.binomial(qty, defect_p)) if qty else 0
            rows.append(
                _Row(
                    "quality", run.quality_ts,
                    {"quality_id": quality_id, "equip_id": equip, "ts": run.quality_ts, "good": qty - defect,
                     "defect": defect},
                    ref=("quality", str(quality_id)),
                )
            )
            deps = [("equipment_status", event_key(equip, k)) for k in range(run.seq_from, run.seq_to + 1)]
            deps.append(("quality", str(quality_id)))
            rows.append(
                _Row(
                    "production", run.end,
                    {"prod_id": prod_id, "equip_id": equip, "period_start_ts": run.period_start,
                     "start_ts": run.start, "end_ts": run.end, "qty": qty, "theoretical_rate": rate,
                     "status_seq_from": run.seq_from, "status_seq_to": run.seq_to, "quality_id": quality_id},
                    deps=deps,
                )
            )
    return rows


_STATES = {"RUN": Status.ON, "SETUP": Status.ON, "STOP": Status.OFF, "MAINT": Status.OFF}
_DEFECTS = {"OK": False, "SCRATCH": True, "CRACK": True, "DIM": True}
_PRODUCTS = ("P1", "P2", "P3")


def _complex_rows(spec: WorkloadSpec, rng: np.random.Generator) -> list[_Row]:
    rows: list[_Row] = []
    run_id = order_id = lot_id = 0
    t0 = spec.start_ts
    for i, (equip, n_runs) in enumerate(zip(equipment_keys(spec.equipment_count), _runs_per_equipment(spec))):
        speed = round(float(rng.uniform(0.8, 1.2)), 3)
        rows.append(
            _Row("equipment", t0, {"equip_id": equip, "line_id": f"L{i % 4 + 1}", "speed_factor": speed},
                 ref=("equipment", equip))
        )
        for code, status in _STATES.items():
            k = f"{equip}:{code}"
            rows.append(
                _Row("equip_state", t0, {"state_key": k, "equip_id": equip, "code": code, "status": status.value},
                     ref=("equip_state", k))
            )
        for code, is_defect in _DEFECTS.items():
            k = f"{equip}:{code}"
            rows.append(
                _Row("defect_code", t0, {"code_key": k, "equip_id": equip, "code": code, "is_defect": is_defect},
                     ref=("defect_code", k))
            )
        for product in _PRODUCTS:
            k = f"{equip}:{product}"
            rows.append(
                _Row("product_spec", t0,
                     {"spec_key": k, "equip_id": equip, "product_id": product,
                      "base_rate": round(float(rng.uniform(60.0, 500.0)), 1)},
                     ref=("product_spec", k))
            )
        base_rates = {r.row["product_id"]: r.row["base_rate"] for r in rows[-3:]}
        defect_p = float(rng.uniform(0.0, 0.1))

        events, runs = _timeline(rng, t0, n_runs, spec.late_delay_max_ms)
        codes: list[str] = []
        for seq, (ts, status, flavour) in enumerate(events, 1):
            code = {"start": "RUN", "run": "RUN", "back": "SETUP", "end": "STOP"}.get(flavour)
            if code is None:
                code = "MAINT" if rng.random() < 0.3 else "STOP"
            codes.append(code)
            key = event_key(equip, seq)
            rows.append(
                _Row("equip_event", ts,
                     {"event_id": key, "equip_id": equip, "seq_no": seq, "start_ts": ts, "state_code": code},
                     ref=None if flavour == "end" else ("equip_event", key))
            )

        runs_left_in_order = 0
        product = _PRODUCTS[0]
        for run in runs:
            if runs_left_in_order == 0:
                order_id += 1
                runs_left_in_order = int(rng.integers(1, 5))
                product = _PRODUCTS[int(rng.integers(0, len(_PRODUCTS)))]
                rows.append(
                    _Row("prod_order", run.start,
                         {"order_id": order_id, "equip_id": equip, "product_id": product,
                          "planned_qty": int(rng.integers(10, 500))},
                         ref=("prod_order", str(order_id)))
                )
            runs_left_in_order -= 1
            run_id += 1
            lot_id += 1
            rate = float(base_rates[product]) * speed
            dur = run.end - run.start
            qty = int(round(rate * dur / HOUR * float(rng.uniform(0.55, 1.05))))
            defect = int(rng.binomial(qty, defect_p)) if qty else 0
            results: list[tuple[str, int]] = [("OK", qty - defect)]
            if defect:
                split_at = sorted(int(x) for x in rng.integers(0, defect + 1, size=2))
                parts = [split_at[0], split_at[1] - split_at[0], defect - split_at[1]]
                results += [(c, n) for c, n in zip(("SCRATCH", "CRACK", "DIM"), parts) if n]
            lot_key = str(lot_id)
            deps = [("equip_event", event_key(equip, k)) for k in range(run.seq_from, run.seq_to + 1)]
            deps += sorted({("equip_state", f"{equip}:{codes[k - 1]}") for k in range(run.seq_from, run.seq_to + 1)})
            deps += [("prod_order", str(order_id)), ("product_spec", f"{equip}:{product}"), ("equipment", equip)]
            deps.append(("quality_lot", lot_key))
            rows.append(
                _Row("quality_lot", run.quality_ts,
                     {"lot_id": lot_id, "equip_id": equip, "ts": run.quality_ts, "result_count": len(results)},
                     ref=("quality_lot", lot_key))
            )
            for j, (code, count) in enumerate(results, 1):
                rk = f"{lot_key}#{j}"
                rows.append(
                    _Row("quality_result", run.quality_ts,
                         {"result_id": rk, "lot_id": lot_id, "equip_id": equip, "defect_code": code, "count": count},
                         ref=("quality_result", rk))
                )
                deps.append(("quality_result", rk))
                deps.append(("defect_code", f"{equip}:{code}"))
            rows.append(
                _Row("prod_run", run.end,
                     {"run_id": run_id, "equip_id": equip, "order_id": order_id, "period_start_ts": run.period_start,
                      "start_ts": run.start, "end_ts": run.end, "qty": qty,
                      "event_seq_from": run.seq_from, "event_seq_to": run.seq_to, "lot_id": lot_id},
                     deps=deps)
            )
    return rows


def _make_late(rows: list[_Row], spec: WorkloadSpec, rng: np.random.Generator) -> int:
    first_need: dict[tuple[str, str], int] = {}
    for r in rows:
        for dep in r.deps:
            if dep not in first_need or r.tx_ts < first_need[dep]:
                first_need[dep] = r.tx_ts
    candidates = [i for i, r in enumerate(rows) if r.ref is not None and r.ref in first_need]
    n_late = int(round(spec.late_master_fraction * len(candidates)))
    if n_late == 0:
        return 0
    chosen = rng.choice(len(candidates), size=n_late, replace=False)
    for c in sorted(int(x) for x in chosen):
        r = rows[candidates[c]]
        r.tx_ts = first_need[r.ref] + int(rng.integers(1, spec.late_delay_max_ms + 1))  # type: ignore[index]
    return n_late


def generate(spec: WorkloadSpec, log: CdcLogWriter, source: SourceStore | None = None) -> Manifest:
    """Write the workload to ``log`` (and ``source``); deterministic in ``spec.seed``."""
    model = model_for(spec.schema_preset)
    rng = np.random.default_rng(spec.seed)
    rows = _simple_rows(spec, rng) if spec.schema_preset is Preset.SIMPLE else _complex_rows(spec, rng)
    late = _make_late(rows, spec, rng)
    table_rank = {c.table: i for i, c in enumerate(model.table_configs())}
    row_keys = model.row_keys()
    rows.sort(key=lambda r: (r.tx_ts, table_rank[r.table], canonical_key(r.row[row_keys[r.table]])))
    counts: dict[str, int] = {c.table: 0 for c in model.table_configs()}
    for r in rows:
        record = ChangeRecord(r.table, Op.INSERT, r.tx_ts, r.row)
        log.append(record)
        if source is not None:
            source.apply(record)
        counts[r.table] += 1
    if source is not None:
        source.commit()
    return Manifest(
        preset=spec.schema_preset.value, seed=spec.seed, equipment_count=spec.equipment_count,
        records_per_table=spec.records_per_table, counts=counts,
        keys=equipment_keys(spec.equipment_count), operational_table=model.operational_table,
        late_rows=late, total=len(rows),
        spec={k: (v.value if hasattr(v, "value") else v) for k, v in asdict(spec).items()},
    )


# -- oracle ------------------------------------------------------------------


def replay_tables(log_dir: str | os.PathLike[str], row_keys: dict[str, str]) -> dict[str, dict[str, dict]]:
    """Final state of every table after applying the whole log."""
    tables: dict[str, dict[str, dict]] = defaultdict(dict)
    for record in read_log(log_dir, row_keys):
        key = canonical_key(record.row[row_keys[record.table]])
        if record.op is Op.DELETE:
            tables[record.table].pop(key, None)
        else:
            tables[record.table][key] = record.row
    return tables


def _simple_inputs(tables: dict[str, dict[str, dict]]):
    changes: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for r in tables["equipment_status"].values():
        changes[r["equip_id"]].append((r["start_ts"], r["status"]))
    runs: dict[str, list[ProductionInterval]] = defaultdict(list)
    claims: dict[str, list[int]] = defaultdict(list)
    for r in tables["production"].values():
        e = r["equip_id"]
        runs[e].append(ProductionInterval(e, r["start_ts"], r["end_ts"], float(r["qty"]), float(r["theoretical_rate"])))
        claims[e].append(r["period_start_ts"])
    quality: dict[str, list[QualityRecord]] = defaultdict(list)
    for r in tables["quality"].values():
        quality[r["equip_id"]].append(QualityRecord(r["equip_id"], r["ts"], r["good"], r["defect"]))
    return changes, runs, claims, quality


def _complex_inputs(tables: dict[str, dict[str, dict]]):
    state_status = {k: r["status"] for k, r in tables["equip_state"].items()}
    changes: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for r in tables["equip_event"].values():
        changes[r["equip_id"]].append((r["start_ts"], state_status[f"{r['equip_id']}:{r['state_code']}"]))
    orders, specs, units = tables["prod_order"], tables["product_spec"], tables["equipment"]
    runs: dict[str, list[ProductionInterval]] = defaultdict(list)
    claims: dict[str, list[int]] = defaultdict(list)
    for r in tables["prod_run"].values():
        e = r["equip_id"]
        order = orders[str(r["order_id"])]
        rate = float(specs[f"{e}:{order['product_id']}"]["base_rate"]) * float(units[e]["speed_factor"])
        runs[e].append(ProductionInterval(e, r["start_ts"], r["end_ts"], float(r["qty"]), rate))
        claims[e].append(r["period_start_ts"])
    is_defect = {k: bool(r["is_defect"]) for k, r in tables["defect_code"].items()}
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for r in tables["quality_result"].values():
        bad = is_defect[f"{r['equip_id']}:{r['defect_code']}"]
        counts[str(r["lot_id"])][1 if bad else 0] += int(r["count"])
    quality: dict[str, list[QualityRecord]] = defaultdict(list)
    for k, lot in tables["quality_lot"].items():
        good, defect = counts[k]
        quality[lot["equip_id"]].append(QualityRecord(lot["equip_id"], lot["ts"], good, defect))
    return changes, runs, claims, quality


def oracle(
    log_dir: str | os.PathLike[str],
    preset: Preset | str = Preset.SIMPLE,
    window_ms: int = DEFAULT_WINDOW_MS,
    out_path: str | os.PathLike[str] | None = None,
) -> str:
    """Expected fact dump, recomputed in batch from the log bytes alone."""
    model = model_for(preset)
    tables = replay_tables(log_dir, model.row_keys())
    if not tables.get(model.operational_table):
        text = ""
    else:
        builder = _simple_inputs if model.preset is Preset.SIMPLE else _complex_inputs
        changes, runs, claims, quality = builder(tables)
        grains = []
        for equip in sorted(runs):
            equip_runs = sorted(runs[equip], key=lambda p: p.start_ts)
            coverage = (min(claims[equip]), equip_runs[-1].end_ts)
            status = status_intervals_from_changes(equip, changes[equip])
            grains.extend(split_windows(status, equip_runs, quality[equip], coverage, window_ms))
        rows = rows_from_grains(grains, window_ms)
        text = format_dump(rows + window_summaries(rows, window_ms))
    if out_path is not None:
        Path(out_path).write_text(text, encoding="utf-8")
    return text


def generate_to_dir(
    spec: WorkloadSpec, directory: str | os.PathLike[str], with_source: bool = False, segment_size: int | None = None
) -> Manifest:
    """Generate into ``directory/log`` and write ``directory/manifest.json``."""
    directory = Path(directory)
    model = model_for(spec.schema_preset)
    kwargs = {} if segment_size is None else {"segment_size": segment_size}
    source = SourceStore(directory / "source.db", model.row_keys()) if with_source else None
    with CdcLogWriter(directory / "log", model.row_keys(), **kwargs) as writer:
        manifest = generate(spec, writer, source)
    if source is not None:
        source.close()
    manifest.save(directory / "manifest.json")
    return manifest


def log_tables(configs: Iterable) -> dict[str, str]:
    return {c.table: c.row_key_column for c in configs}
