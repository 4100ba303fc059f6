"""Desk-scale versions of the throughput experiments.

Every write to the fact table costs 2 ms and every LOOKBACK query 2 ms, a
stand-in for round trips to remote systems.  Numbers depend on the
machine; the shapes are what matter.
"""

import tempfile
from pathlib import Path

from ondemand_etl import WorkloadSpec
from ondemand_etl.harness import PipelineConfig, bench_scalability, bench_tailer, measure
from ondemand_etl.processor import Mode

work = Path(tempfile.mkdtemp(prefix="etl-bench-"))
cfg = PipelineConfig(write_latency_s=0.002, query_latency_s=0.002, quiescence_s=0.1)
spec = WorkloadSpec(records_per_table=2000)

# %% cached join vs querying the source for every run
cached, _ = measure(cfg, spec, work / "cached")
lookback, _ = measure(cfg.replace(mode=Mode.LOOKBACK), spec, work / "lookback")
print(f"CACHED {cached:.0f}/s, LOOKBACK {lookback:.0f}/s, ratio {cached / lookback:.1f}")

# %% richer schema, same resources
complex_, _ = measure(cfg, WorkloadSpec(records_per_table=2000, schema_preset="COMPLEX"), work / "complex")
print(f"COMPLEX {complex_:.0f}/s, {complex_ / cached:.2f} of SIMPLE")

# %% worker sweep on 20 operational partitions
for row in bench_scalability(cfg, spec, [1, 2, 4, 8, 20, 24], work / "scale", csv_path=work / "scale.csv"):
    print(f"{row['workers']:>3} workers: {row['records_per_s']}/s")

# %% log tailers: every tailer scans the whole shared log
for mode in ("GROWING", "FIXED"):
    rows = bench_tailer([1, 2, 4, 8, 16], mode, work / mode, csv_path=work / f"{mode}.csv")
    print(mode, [round(r["records_per_s"]) for r in rows])
print("CSVs in", work)
