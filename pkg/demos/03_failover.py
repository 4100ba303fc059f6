"""Kill two of five workers halfway through and check nothing was lost.

The survivors receive new partition assignments, reset their caches,
reload the master snapshot for their larger key range and pick up any
buffered runs the dead workers left in the shared register.  Offsets that
were processed but not committed are delivered again; the fact table
absorbs the repeats because every row is keyed by its grain.
"""

import tempfile
from pathlib import Path

from ondemand_etl import WorkloadSpec
from ondemand_etl.harness import Kill, PipelineConfig, fault_inject

work = Path(tempfile.mkdtemp(prefix="etl-fault-"))
cfg = PipelineConfig(worker_count=5, write_latency_s=0.002, preload=True, quiescence_s=0.2)

fr = fault_inject(cfg, WorkloadSpec(records_per_table=2000, seed=11),
                  [Kill("w2", 0.5), Kill("w4", 0.5)], work)
m = fr.result.metrics
print("verdict:", "PASS" if fr.passed else "FAIL")
print("kills:", m.kills)
print(f"before the kills {m.pre_kill_rate:.0f} runs/s, after {m.post_kill_rate:.0f} runs/s")
print(f"bootstraps: {len(m.bootstrap_ms)} (5 initial + 3 after the rebalance)")
print(fr.report)
