import json

import pytest

from ondemand_etl.broker import Broker
from ondemand_etl.harness import bench, cli, pipeline
from ondemand_etl.harness.config import ConfigError, PipelineConfig, describe, load_config
from ondemand_etl.harness.metrics import CSV_COLUMNS, Sampler, read_csv, write_csv
from ondemand_etl.harness.pipeline import Kill, RunTimeout
from ondemand_etl.processor import Mode, Worker
from ondemand_etl.workload import WorkloadSpec, generate_to_dir

from conftest import FAST

SMALL = WorkloadSpec(records_per_table=300, seed=1)


# -- config ---------------------------------------------------------------------


def test_load_config_file_and_overrides(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[pipeline]\nworker_count = 6\nmode = LOOKBACK\npreload = yes\n"
                   "[workload]\nseed = 9\nschema_preset = COMPLEX\n")
    cfg, spec = load_config(ini, ["window_ms=60000", "workload.seed=10", "late_master_fraction=0.2"])
    assert (cfg.worker_count, cfg.mode, cfg.preload, cfg.window_ms) == (6, Mode.LOOKBACK, True, 60000)
    assert (spec.seed, spec.schema_preset.value, spec.late_master_fraction) == (10, "COMPLEX", 0.2)
    d = describe(cfg, spec)
    assert d["pipeline.mode"] == "LOOKBACK" and d["workload.seed"] == 10
    json.dumps(d)


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("[pipeline]\nworker_count = 0\n", []),
        ("[pipeline]\nbogus = 1\n", []),
        ("[other]\nx = 1\n", []),
        ("", ["worker_count=many"]),
        ("", ["nokey"]),
        ("", ["unknown=1"]),
        ("", ["mode=FAST"]),
        ("", ["preload=maybe"]),
        ("", ["late_master_fraction=2"]),
        ("not an ini", []),
    ],
)
def test_config_errors(tmp_path, text, overrides):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(ConfigError):
        load_config(ini, overrides)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_kill_parse():
    assert Kill.parse("w2@0.5") == Kill("w2", 0.5)
    for bad in ("w2", "w2@x", "@0.5", "w2@1.5"):
        with pytest.raises(ConfigError):
            Kill.parse(bad)


def test_kill_target_must_exist(tmp_path):
    with pytest.raises(ConfigError):
        pipeline.run(FAST.replace(worker_count=2), SMALL, tmp_path, kills=[Kill("w3", 0.5)])


# -- verify and metrics -------------------------------------------------------------


@pytest.fixture(scope="module")
def streamed(tmp_path_factory):
    work = tmp_path_factory.mktemp("stream")
    return pipeline.run(FAST, WorkloadSpec(records_per_table=300, seed=1, late_master_fraction=0.3), work)


def test_streaming_run_matches_oracle(streamed):
    report = bench.verify_run(streamed, FAST.window_ms)
    assert report.ok, str(report)
    assert streamed.integrity == []
    assert streamed.metrics.operational_records == streamed.manifest.counts["production"]
    assert streamed.metrics.bootstrap_ms and min(streamed.metrics.bootstrap_ms) > 0


def test_run_writes_artifacts(streamed):
    work = streamed.work_dir
    assert (work / "facts.dump").read_text() == streamed.dump
    header, rows = read_csv(work / "metrics.csv")
    assert header["workload.seed"] == 1 and header["pipeline.worker_count"] == 4
    assert rows and tuple(rows[0]) == CSV_COLUMNS
    assert {r["stage"] for r in rows} == {"processor", "producer", "uploader"}
    summary = json.loads((work / "summary.json").read_text())
    assert summary["metrics"]["operational_records"] == streamed.metrics.operational_records


def test_verify_self_and_mutation(streamed):
    assert bench.verify(streamed.dump, streamed.dump).ok
    lines = streamed.dump.splitlines()
    fields = lines[0].split("\t")
    fields[6] = f"{float(fields[6]) + 1:.6f}"  # qty
    mutated = "\n".join(["\t".join(fields)] + lines[1:]) + "\n"
    report = bench.verify(streamed.dump, mutated)
    assert not report.ok
    assert report.differences == [f"{fields[0]} qty: {float(lines[0].split(chr(9))[6])!r} != {float(fields[6])!r}"]
    dropped = bench.verify(streamed.dump, "\n".join(lines[1:]) + "\n")
    assert dropped.differences == [f"{fields[0]}: only in first dump"]


def test_verify_tolerance():
    line = "\t".join(["f1", "E1", "0", "0", "10", "OFF", "0.000000", "0", "0", "0.000000",
                      "0.500000", "null", "null", "null"])
    other = line.replace("0.500000", "0.500001")
    assert not bench.verify(line, other).ok
    assert bench.verify(line, other, tolerance=1e-5).ok


def test_write_csv_header(tmp_path):
    text = write_csv(tmp_path / "x.csv", {"seed": 3, "mode": "FIXED"}, ("a", "b"), [(1, 2)])
    assert text.startswith("# mode: \"FIXED\"\n# seed: 3\na,b\n1,2\n")
    assert read_csv(tmp_path / "x.csv") == ({"mode": "FIXED", "seed": 3}, [{"a": "1", "b": "2"}])


def test_sampler_rates():
    counter = [0]
    s = Sampler(interval_s=1.0, window_s=10.0)
    s.add("processor", "w1", lambda: (counter[0], 2, 0))
    s.sample_once()
    counter[0] = 100
    s.sample_once()
    last = s.samples[-1]
    assert last.records_per_s > 0 and last.buffered == 2 and last.stage == "processor"


# -- end-to-end variants ----------------------------------------------------------------


def test_duplicates_do_not_change_the_dump(tmp_path):
    clean = pipeline.run(FAST, SMALL, tmp_path / "clean")
    dup = pipeline.run(FAST, WorkloadSpec(records_per_table=300, seed=1, duplicate_fraction=0.1), tmp_path / "dup")
    assert dup.metrics.duplicates_published > 0
    assert bench.verify(clean.dump, dup.dump).ok


def test_no_kills_equals_plain_run(tmp_path):
    plain = pipeline.run(FAST.replace(worker_count=5, preload=True), SMALL, tmp_path / "plain")
    fault = bench.fault_inject(FAST.replace(worker_count=5, preload=True), SMALL, [], tmp_path / "fault")
    assert fault.passed and fault.result.dump == plain.dump
    assert fault.pre_kill_rate is None


def test_replay_existing_log(tmp_path):
    generate_to_dir(SMALL, tmp_path / "sample")
    res = pipeline.run(FAST.replace(worker_count=2), WorkloadSpec(), tmp_path / "run", source_dir=tmp_path / "sample")
    assert res.manifest.seed == 1 and bench.verify_run(res, FAST.window_ms).ok


def test_lookback_run_matches_oracle(tmp_path):
    cfg = FAST.replace(mode=Mode.LOOKBACK, query_latency_s=0.0, preload=True)
    res = pipeline.run(cfg, SMALL, tmp_path)
    assert bench.verify_run(res, cfg.window_ms).ok


def test_worker_dies_during_bootstrap(tmp_path, monkeypatch):
    original = Worker.cache_bootstrap
    died = []

    def dying_bootstrap(self, assignment):
        if self.worker_id == "w2" and not died:
            died.append(True)
            apply = self.cache.apply
            calls = [0]

            def apply_then_die(record):
                calls[0] += 1
                if calls[0] == 5:
                    self.kill()
                return apply(record)

            self.cache.apply = apply_then_die
        return original(self, assignment)

    monkeypatch.setattr(Worker, "cache_bootstrap", dying_bootstrap)
    cfg = FAST.replace(worker_count=5, preload=True)
    fr = bench.fault_inject(cfg, SMALL, [], tmp_path)
    assert died and fr.result.metrics.bootstrap_ms  # the others bootstrapped twice
    assert fr.passed, str(fr.report)


def test_abort_leaves_persist_dir_readable(tmp_path):
    cfg = FAST.replace(persist_dir=str(tmp_path / "broker"), deadline_s=0.3, replay_pause_s=0.01)
    with pytest.raises(RunTimeout):
        pipeline.run(cfg, WorkloadSpec(records_per_table=2000), tmp_path / "work")
    reopened = Broker(tmp_path / "broker")
    assert sum(reopened.end_offsets("production")) > 0
    assert set(reopened.topics) == {"production", "equipment_status", "quality"}
    reopened.close()


# -- benches -------------------------------------------------------------------------


def test_bench_scalability_csv(tmp_path):
    rows = bench.bench_scalability(FAST, SMALL, [1, 2], tmp_path, csv_path=tmp_path / "s.csv")
    assert [r["workers"] for r in rows] == [1, 2] and all(r["status"] == "ok" for r in rows)
    header, body = read_csv(tmp_path / "s.csv")
    assert header["bench"] == "scalability" and header["workload.seed"] == 1
    assert [int(r["workers"]) for r in body] == [1, 2]


def test_bench_tailer_counts(tmp_path):
    rows = bench.bench_tailer([1, 2], "FIXED", tmp_path, records_per_table=50, total_tables=4, read_latency_s=0.0,
                              csv_path=tmp_path / "t.csv")
    assert [r["extracted_records"] for r in rows] == [50, 100]
    assert all(r["log_records"] == 200 for r in rows)
    grow = bench.bench_tailer([2], "GROWING", tmp_path / "g", records_per_table=50, total_tables=4, read_latency_s=0.0)
    assert grow[0]["log_records"] == 100
    with pytest.raises(ValueError):
        bench.bench_tailer([5], "FIXED", tmp_path, total_tables=4)


# -- CLI ----------------------------------------------------------------------------------


def test_cli_sample_oracle_verify(tmp_path, capsys):
    assert cli.main(["sample", "-o", str(tmp_path / "s"), "-s", "records_per_table=200"]) == 0
    assert cli.main(["oracle", "--log", str(tmp_path / "s" / "log"), "-o", str(tmp_path / "a.dump")]) == 0
    a = tmp_path / "a.dump"
    assert cli.main(["verify", str(a), str(a)]) == 0
    b = tmp_path / "b.dump"
    b.write_text(a.read_text().replace("ON_IDLE", "OFF", 1))
    assert cli.main(["verify", str(a), str(b)]) == 1
    b.write_text("garbage\n")
    assert cli.main(["verify", str(a), str(b)]) == 2
    assert cli.main(["verify", str(a), str(tmp_path / "nope")]) == 2


def test_cli_run_and_fault(tmp_path, capsys):
    common = ["-s", "records_per_table=200", "-s", "quiescence_s=0.1"]
    assert cli.main(["run", "-w", str(tmp_path / "r"), "--verify", *common]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["verify"].startswith("dumps match")
    assert cli.main(["fault", "-w", str(tmp_path / "f"), "-k", "w2@0.5", "-s", "worker_count=3", *common]) == 0
    assert json.loads(capsys.readouterr().out)["verdict"] == "PASS"


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "-s", "worker_count=0"]) == 2
    assert cli.main(["fault", "-k", "w9@0.5", "-s", "worker_count=2"]) == 2
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["oracle", "--log", str(tmp_path / "missing")]) == 2
    assert cli.main(["run", "-w", str(tmp_path / "t"), "-s", "deadline_s=0.2", "-s", "replay_pause_s=0.05"]) == 3
    assert "runtime error" in capsys.readouterr().err


def test_cli_benches(tmp_path, capsys):
    assert cli.main(["bench-scale", "-w", str(tmp_path), "--workers", "1,2", "-s", "records_per_table=100",
                     "-s", "quiescence_s=0.05"]) == 0
    assert (tmp_path / "scalability.csv").exists()
    assert cli.main(["bench-tailer", "-w", str(tmp_path / "t"), "--tables", "1,2", "--records", "20",
                     "--read-latency", "0"]) == 0
    assert (tmp_path / "t" / "tailer_fixed.csv").exists() and (tmp_path / "t" / "tailer_growing.csv").exists()


def test_tailer_modes_read_the_same_log_at_full_width(tmp_path):
    kw = dict(records_per_table=40, total_tables=4, read_latency_s=0.0)
    fixed = bench.bench_tailer([4], "FIXED", tmp_path / "f", **kw)[0]
    growing = bench.bench_tailer([4], "GROWING", tmp_path / "g", **kw)[0]
    assert fixed["log_records"] == growing["log_records"] == 160
    assert fixed["extracted_records"] == growing["extracted_records"] == 160
