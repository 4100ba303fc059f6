import random

import pytest

from ondemand_etl.broker import Broker, Nature, Rebalance
from ondemand_etl.cdc_log import ChangeRecord, Op
from ondemand_etl.hashing import partition_for
from ondemand_etl.oee import GrainKind
from ondemand_etl.processor import (
    BUFFER_PREFIX,
    GROUP,
    Disposition,
    LateBufferEntry,
    MasterCacheTable,
    Mode,
    NotReady,
    Worker,
    WorkerKilled,
)
from ondemand_etl.producer import TableConfig, create_topics, encode_payload, message_headers, select_key
from ondemand_etl.source_store import SourceStore
from ondemand_etl.steelworks import SimpleModel
from ondemand_etl.uploader import TargetStore

HOUR = 3_600_000
MIN = 60_000
MODEL = SimpleModel()
CONFIGS = MODEL.table_configs(partition_count=4)
BY_TABLE = {c.table: c for c in CONFIGS}


def publish(broker, record):
    cfg = BY_TABLE[record.table]
    broker.publish(cfg.table, select_key(record, cfg), encode_payload(record), record.op is Op.DELETE,
                   message_headers(record, cfg))


def status(equip, seq, ts, value, tx=None):
    row = {"status_id": f"{equip}#{seq:06d}", "equip_id": equip, "seq_no": seq, "status": value, "start_ts": ts}
    return ChangeRecord("equipment_status", Op.INSERT, ts if tx is None else tx, row)


def quality(qid, equip, ts, good, defect, tx=None):
    row = {"quality_id": qid, "equip_id": equip, "ts": ts, "good": good, "defect": defect}
    return ChangeRecord("quality", Op.INSERT, ts if tx is None else tx, row)


def production(pid, equip, start, end, qid, seq_from=1, seq_to=2, period_start=0, tx=None):
    row = {"prod_id": pid, "equip_id": equip, "period_start_ts": period_start, "start_ts": start, "end_ts": end,
           "qty": 30, "theoretical_rate": 60.0, "status_seq_from": seq_from, "status_seq_to": seq_to,
           "quality_id": qid}
    return ChangeRecord("production", Op.INSERT, end if tx is None else tx, row)


def one_run(equip="E1", tx_shift=0):
    """OFF at 0, ON at 10 min, OFF at 80 min, a run in [20, 60) min."""
    return [
        status(equip, 1, 0, "OFF", tx=tx_shift),
        status(equip, 2, 10 * MIN, "ON", tx=10 * MIN + tx_shift),
        status(equip, 3, 80 * MIN, "OFF", tx=80 * MIN + tx_shift),
        quality(1, equip, 30 * MIN, 27, 3, tx=30 * MIN + tx_shift),
    ], production(1, equip, 20 * MIN, 60 * MIN, 1, seq_from=1, seq_to=3)


def make_worker(broker, wid="w1", mode=Mode.CACHED, source=None, store=None, **kw):
    store = store or TargetStore(HOUR)
    return Worker(wid, broker, MODEL, CONFIGS, store, HOUR, mode=mode, source=source, **kw), store


@pytest.fixture
def broker():
    b = Broker()
    create_topics(b, CONFIGS)
    return b


def start(broker, *workers):
    broker.subscribe(GROUP, [w.worker_id for w in workers], ["production"])
    for w in workers:
        w.step()
        assert w.ready


# -- cache ----------------------------------------------------------------------


def test_cache_keeps_only_admitted_keys():
    cfg = TableConfig("equipment", Nature.MASTER, "equip_id", "equip_id")
    t = MasterCacheTable(cfg, lambda k: k in {"E1", "E2"})
    for i in range(1, 21):
        t.apply(ChangeRecord("equipment", Op.INSERT, i, {"equip_id": f"E{i}"}))
    assert set(t.rows) == {"E1", "E2"}
    assert t.high_water_tx_ts == 2


def test_cache_upsert_then_delete():
    cfg = TableConfig("equipment", Nature.MASTER, "equip_id", "equip_id")
    t = MasterCacheTable(cfg, lambda k: k == "E1")
    t.apply(ChangeRecord("equipment", Op.INSERT, 1, {"equip_id": "E1", "status": "on"}))
    assert t.rows["E1"]["status"] == "on"
    assert not t.apply(ChangeRecord("equipment", Op.INSERT, 2, {"equip_id": "E9"}))
    t.apply(ChangeRecord("equipment", Op.DELETE, 3, {"equip_id": "E1"}))
    assert t.rows == {} and t.history == {}


def test_cache_as_of_orders_by_tx():
    cfg = TableConfig("s", Nature.MASTER, "id", "equip_id")
    t = MasterCacheTable(cfg, lambda k: True)
    for tx, rid in ((30, "c"), (10, "a"), (20, "b")):
        t.apply(ChangeRecord("s", Op.INSERT, tx, {"id": rid, "equip_id": "E1"}))
    assert [r["id"] for r in t.as_of("E1", 25)] == ["a", "b"]


def test_empty_master_gives_empty_cache(broker):
    w, _ = make_worker(broker)
    start(broker, w)
    assert len(w.cache) == 0 and w.cache.high_water() == 0
    assert w.stats.bootstrap_ms and w.stats.bootstrap_ms[0] >= 0


def test_bootstrap_filters_snapshot_by_owned_partitions(broker):
    for i in range(1, 21):
        publish(broker, status(f"E{i}", 1, 0, "ON"))
    ws = [make_worker(broker, f"w{i}")[0] for i in (1, 2)]
    start(broker, *ws)
    keys = [set(w.cache.tables["equipment_status"].history) for w in ws]
    assert not keys[0] & keys[1]
    assert keys[0] | keys[1] == {f"E{i}" for i in range(1, 21)}
    for w, ks in zip(ws, keys):
        assert all(partition_for(k, 4) in w._assigned_parts for k in ks)


def test_live_master_tail_equals_filtered_replay(broker):
    rng = random.Random(5)
    transcript = []
    for i in range(300):
        equip = f"E{rng.randrange(8)}"
        op = Op.DELETE if rng.random() < 0.2 else Op.INSERT
        rec = ChangeRecord("quality", op, i, {"quality_id": rng.randrange(30), "equip_id": equip, "ts": i,
                                              "good": 1, "defect": 0})
        transcript.append(rec)
    for rec in transcript[:150]:
        publish(broker, rec)
    w, _ = make_worker(broker)
    start(broker, w)
    for rec in transcript[150:]:
        publish(broker, rec)
    w.drain_master()
    expected = {}
    for rec in transcript:
        key = str(rec.row["quality_id"])
        if rec.op is Op.DELETE:
            expected.pop(key, None)
        else:
            expected[key] = rec.row
    # a key's latest row decides which worker owns it
    mine = {k: r for k, r in expected.items() if w.admits(r["equip_id"])}
    assert w.cache.tables["quality"].rows == mine


# -- transform, buffer, sweep --------------------------------------------------------


def test_processed_with_grains(broker):
    masters, prod = one_run()
    for r in masters:
        publish(broker, r)
    w, store = make_worker(broker)
    start(broker, w)
    publish(broker, prod)
    assert w.step() == 1
    kinds = [(r.start_ts, r.end_ts, r.kind) for r in store.rows()]
    assert (20 * MIN, 60 * MIN, GrainKind.ON_PRODUCING.value) in kinds
    assert sorted(k[:2] for k in kinds)[0] == (0, 10 * MIN)
    (producing,) = [r for r in store.rows() if r.kind == "ON_PRODUCING"]
    assert producing.good == 27 and producing.quality == pytest.approx(0.9)


def test_late_master_is_buffered_then_swept(broker):
    masters, prod = one_run(tx_shift=2 * HOUR)
    w, store = make_worker(broker, sweep_interval_s=0.0)
    start(broker, w)
    publish(broker, prod)
    (msg,) = [m for m in broker.read("production", partition_for("E1", 4), 0, 10)]
    result = w.handle(msg)
    assert result.disposition is Disposition.BUFFERED and len(w.buffer) == 1
    assert broker.shared_keys(BUFFER_PREFIX) == [next(iter(w.buffer))]
    for r in masters[:2]:
        publish(broker, r)
    w.drain_master()
    # the high-water mark has not passed the run yet
    w.cache.tables["equipment_status"].high_water_tx_ts = prod.tx_ts - 10
    w.cache.tables["quality"].high_water_tx_ts = 0
    assert w.buffer_sweep() == 0 and len(store) == 0
    for r in masters[2:]:
        publish(broker, r)
    w.drain_master()
    assert w.buffer_sweep() == 1
    assert not w.buffer and broker.shared_keys(BUFFER_PREFIX) == []
    assert w.stats.reprocessed == 1 and len(store) > 0


def test_sweep_skips_entries_newer_than_high_water(broker):
    w, _ = make_worker(broker)
    start(broker, w)
    publish(broker, status("E1", 1, 0, "ON", tx=90))
    w.drain_master()
    rec = production(1, "E1", 0, 100, 1, 1, 1, tx=100)
    entry = LateBufferEntry("E1", rec, MODEL.resolve(rec.row, w.cache), 0, 1, ("production", 0, 0))
    w.buffer[entry.store_key] = entry
    assert w.cache.high_water() == 90
    assert w.buffer_sweep() == 0 and entry.attempt_count == 1


def test_retry_cap_dead_letters(broker):
    w, _ = make_worker(broker, retry_cap=2)
    start(broker, w)
    rec = production(1, "E1", 0, 100, 1, 1, 1, tx=5)
    entry = LateBufferEntry("E1", rec, MODEL.resolve(rec.row, w.cache), 0, 1, ("production", 0, 0))
    w.buffer[entry.store_key] = entry
    for tx in (10, 20, 30):
        publish(broker, quality(99, "E1", tx, 1, 0, tx=tx))  # changes the cache, never the missing row
        w.drain_master()
        w.buffer_sweep()
    assert not w.buffer and w.stats.dead_letters == 1


def test_duplicate_offset_produces_nothing(broker):
    masters, prod = one_run()
    for r in masters:
        publish(broker, r)
    w, store = make_worker(broker)
    start(broker, w)
    publish(broker, prod)
    (msg,) = broker.read("production", partition_for("E1", 4), 0, 10)
    first = w.handle(msg)
    again = w.handle(msg)
    assert first.grains and again.disposition is Disposition.PROCESSED and again.grains == []
    assert w.stats.duplicates == 1


def test_poison_message_is_dead_lettered(broker):
    w, _ = make_worker(broker)
    start(broker, w)
    broker.publish("production", "E1", b"{not json")
    w.step()
    assert w.stats.dead_letters == 1
    assert broker.committed(GROUP)[("production", partition_for("E1", 4))] == 1


def test_not_ready_before_assignment(broker):
    w, _ = make_worker(broker)
    broker.subscribe(GROUP, "w1", ["production"])
    publish(broker, one_run()[1])
    (msg,) = broker.read("production", partition_for("E1", 4), 0, 10)
    with pytest.raises(NotReady):
        w.transform(msg)


def test_kill_leaves_offset_uncommitted(broker):
    masters, prod = one_run()
    for r in masters:
        publish(broker, r)
    w, _ = make_worker(broker)
    start(broker, w)
    publish(broker, prod)
    w.kill()
    with pytest.raises(WorkerKilled):
        w.step()
    assert broker.committed(GROUP) == {}


def test_buffer_survives_worker_failure(broker):
    _, prod = one_run(tx_shift=HOUR)
    a, _ = make_worker(broker, "a")
    b, _ = make_worker(broker, "b")
    start(broker, a, b)
    owner = a if a.admits("E1") else b
    other = b if owner is a else a
    publish(broker, prod)
    owner.step()
    assert len(owner.buffer) == 1
    broker.leave(GROUP, owner.worker_id)
    other.step()  # rebalance: reloads the shared buffer
    assert len(other.buffer) == 1
    assert next(iter(other.buffer.values())).record.row == prod.row


def test_lookback_mode_matches_cached(broker, tmp_path):
    masters, prod = one_run()
    src = SourceStore(tmp_path / "src.db", MODEL.row_keys())
    for r in masters:
        publish(broker, r)
        src.apply(r)
    src.commit()
    publish(broker, prod)
    cached, s1 = make_worker(broker, "c")
    start(broker, cached)
    cached.step()
    b2 = Broker()
    create_topics(b2, CONFIGS)
    publish(b2, prod)
    look, s2 = make_worker(b2, "l", mode=Mode.LOOKBACK, source=src)
    start(b2, look)
    look.step()
    assert s1.export() == s2.export() != ""
    assert len(look.cache) == 0
    src.close()


def test_lookback_needs_source(broker):
    with pytest.raises(ValueError):
        make_worker(broker, mode=Mode.LOOKBACK)


def test_rebalance_event_triggers_bootstrap(broker):
    w, _ = make_worker(broker)
    broker.subscribe(GROUP, "w1", ["production"])
    items = broker.poll(GROUP, "w1")
    assert isinstance(items[0], Rebalance)
    w.cache_bootstrap(items[0].assignment)
    assert w.ready and w._assigned_parts == {0, 1, 2, 3}
