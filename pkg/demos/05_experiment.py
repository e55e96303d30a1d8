"""Delay versus cluster size.

Publishes 200 readings at 5 per second and compares immediate loopback
delivery with delivery after commit, for growing validator sets.
"""

# %%
import numpy as np

from chainbroker.harness import DelayPath, ExperimentConfig, run_experiment

rows = []
for n in (4, 7, 10, 13):
    r = run_experiment(ExperimentConfig(node_count=n, tps=5, total_messages=200, seed=0))
    comm = r.delays(DelayPath.COMMITTED)
    loop = r.delays(DelayPath.LOOPBACK)
    rows.append((n, comm.mean(), np.percentile(comm, 95), loop.mean(), r.blocks, r.bytes_sent))

print(f"{'n':>3} {'mean':>8} {'p95':>8} {'loop':>6} {'blocks':>6} {'bytes':>10}")
for n, m, p95, lm, b, by in rows:
    print(f"{n:>3} {m:8.1f} {p95:8.1f} {lm:6.1f} {b:6d} {by:10d}")

# %% a pause after each commit lets transactions pile up into fewer blocks
from chainbroker.consensus import ConsensusConfig

for tps in (1, 5):
    cfg = ExperimentConfig(tps=tps, total_messages=100, consensus=ConsensusConfig(commit_timeout_ms=1000))
    print("tps", tps, "blocks", run_experiment(cfg).blocks)
