"""Steelworks data models and the join logic of the streaming transform.

A production run row claims the span from the end of the previous run
of the same equipment to its own end.  It names every master row it
depends on: the range of equipment status changes in effect over that
span and its quality inspection.  Resolving a run against a master
lookup either yields complete OEE inputs or names the first missing
master row, which is what sends a run to the late-message buffer.

Two presets exist.  SIMPLE uses one table per data category.  COMPLEX
normalises each category into header, detail and lookup tables, so a run
needs several more lookups before it can be split.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Protocol

from .broker import Nature
from .oee import ProductionInterval, QualityRecord, Status, StatusInterval
from .producer import TableConfig, canonical_key

Row = Mapping[str, object]


class Preset(str, Enum):
    SIMPLE = "SIMPLE"
    COMPLEX = "COMPLEX"


class MasterLookup(Protocol):
    def get(self, table: str, row_key: str) -> Row | None: ...

    def get_many(self, table: str, row_keys: list[str]) -> dict[str, Row]: ...


@dataclass(frozen=True)
class Missing:
    table: str
    key: str


@dataclass(frozen=True)
class ClaimInputs:
    equip: str
    span: tuple[int, int]
    status: list[StatusInterval]
    production: list[ProductionInterval]
    quality: list[QualityRecord]


def event_key(equip: str, seq_no: int) -> str:
    return f"{equip}#{seq_no:06d}"


def _status_from_events(equip: str, events: list[tuple[int, int, Status]]) -> list[StatusInterval]:
    # events: (seq_no, start_ts, status), contiguous seq range
    events.sort()
    out = []
    for i, (_, start, status) in enumerate(events):
        end = events[i + 1][1] if i + 1 < len(events) else None
        out.append(StatusInterval(equip, status, start, end))
    return out


def _fetch_all(lookup: MasterLookup, table: str, keys: list[str]) -> dict[str, Row] | Missing:
    found = lookup.get_many(table, keys)
    for k in keys:
        if k not in found:
            return Missing(table, k)
    return found


def _fetch_one(lookup: MasterLookup, table: str, key: str) -> Row | Missing:
    row = lookup.get(table, key)
    return Missing(table, key) if row is None else row


class SteelworksModel:
    preset: Preset
    operational_table: str
    business_key_column = "equip_id"

    def table_configs(self, partition_count: int = 20, master_partitions: int = 1) -> list[TableConfig]:
        raise NotImplementedError

    def resolve(self, row: Row, lookup: MasterLookup) -> ClaimInputs | Missing:
        raise NotImplementedError

    def row_keys(self) -> dict[str, str]:
        return {c.table: c.row_key_column for c in self.table_configs()}


class SimpleModel(SteelworksModel):
    preset = Preset.SIMPLE
    operational_table = "production"

    def table_configs(self, partition_count: int = 20, master_partitions: int = 1) -> list[TableConfig]:
        return [
            TableConfig("production", Nature.OPERATIONAL, "prod_id", "equip_id", partition_count),
            TableConfig("equipment_status", Nature.MASTER, "status_id", "equip_id", master_partitions),
            TableConfig("quality", Nature.MASTER, "quality_id", "equip_id", master_partitions),
        ]

    def resolve(self, row: Row, lookup: MasterLookup) -> ClaimInputs | Missing:
        equip = str(row["equip_id"])
        keys = [event_key(equip, k) for k in range(int(row["status_seq_from"]), int(row["status_seq_to"]) + 1)]
        found = _fetch_all(lookup, "equipment_status", keys)
        if isinstance(found, Missing):
            return found
        events = [(int(r["seq_no"]), int(r["start_ts"]), Status(r["status"])) for r in found.values()]
        quality: list[QualityRecord] = []
        if row.get("quality_id") is not None:
            q = _fetch_one(lookup, "quality", canonical_key(row["quality_id"]))
            if isinstance(q, Missing):
                return q
            quality.append(QualityRecord(equip, int(q["ts"]), int(q["good"]), int(q["defect"])))
        run = ProductionInterval(
            equip, int(row["start_ts"]), int(row["end_ts"]), float(row["qty"]), float(row["theoretical_rate"])
        )
        return ClaimInputs(
            equip, (int(row["period_start_ts"]), run.end_ts), _status_from_events(equip, events), [run], quality
        )


class ComplexModel(SteelworksModel):
    preset = Preset.COMPLEX
    operational_table = "prod_run"

    def table_configs(self, partition_count: int = 20, master_partitions: int = 1) -> list[TableConfig]:
        m = Nature.MASTER
        return [
            TableConfig("prod_run", Nature.OPERATIONAL, "run_id", "equip_id", partition_count),
            TableConfig("prod_order", m, "order_id", "equip_id", master_partitions),
            TableConfig("product_spec", m, "spec_key", "equip_id", master_partitions),
            TableConfig("equipment", m, "equip_id", "equip_id", master_partitions),
            TableConfig("equip_event", m, "event_id", "equip_id", master_partitions),
            TableConfig("equip_state", m, "state_key", "equip_id", master_partitions),
            TableConfig("quality_lot", m, "lot_id", "equip_id", master_partitions),
            TableConfig("quality_result", m, "result_id", "equip_id", master_partitions),
            TableConfig("defect_code", m, "code_key", "equip_id", master_partitions),
        ]

    def resolve(self, row: Row, lookup: MasterLookup) -> ClaimInputs | Missing:
        equip = str(row["equip_id"])
        keys = [event_key(equip, k) for k in range(int(row["event_seq_from"]), int(row["event_seq_to"]) + 1)]
        events = _fetch_all(lookup, "equip_event", keys)
        if isinstance(events, Missing):
            return events
        state_keys = sorted({f"{equip}:{e['state_code']}" for e in events.values()})
        states = _fetch_all(lookup, "equip_state", state_keys)
        if isinstance(states, Missing):
            return states
        changes = [
            (int(e["seq_no"]), int(e["start_ts"]), Status(states[f"{equip}:{e['state_code']}"]["status"]))
            for e in events.values()
        ]

        order = _fetch_one(lookup, "prod_order", canonical_key(row["order_id"]))
        if isinstance(order, Missing):
            return order
        spec = _fetch_one(lookup, "product_spec", f"{equip}:{order['product_id']}")
        if isinstance(spec, Missing):
            return spec
        unit = _fetch_one(lookup, "equipment", equip)
        if isinstance(unit, Missing):
            return unit
        rate = float(spec["base_rate"]) * float(unit["speed_factor"])

        quality: list[QualityRecord] = []
        if row.get("lot_id") is not None:
            lot_id = canonical_key(row["lot_id"])
            lot = _fetch_one(lookup, "quality_lot", lot_id)
            if isinstance(lot, Missing):
                return lot
            result_keys = [f"{lot_id}#{j}" for j in range(1, int(lot["result_count"]) + 1)]
            results = _fetch_all(lookup, "quality_result", result_keys)
            if isinstance(results, Missing):
                return results
            code_keys = sorted({f"{equip}:{r['defect_code']}" for r in results.values()})
            codes = _fetch_all(lookup, "defect_code", code_keys)
            if isinstance(codes, Missing):
                return codes
            good = defect = 0
            for r in results.values():
                if codes[f"{equip}:{r['defect_code']}"]["is_defect"]:
                    defect += int(r["count"])
                else:
                    good += int(r["count"])
            quality.append(QualityRecord(equip, int(lot["ts"]), good, defect))

        run = ProductionInterval(equip, int(row["start_ts"]), int(row["end_ts"]), float(row["qty"]), rate)
        return ClaimInputs(
            equip, (int(row["period_start_ts"]), run.end_ts), _status_from_events(equip, changes), [run], quality
        )


def model_for(preset: Preset | str) -> SteelworksModel:
    return {Preset.SIMPLE: SimpleModel, Preset.COMPLEX: ComplexModel}[Preset(preset)]()
