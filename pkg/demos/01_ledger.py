"""A block log that audits itself.

Build a short chain, confirm it verifies, then flip one byte inside a
committed payload and watch verification name the height that broke.
"""

# %%
import tempfile
from pathlib import Path

from chainbroker.fixtures import random_chain
from chainbroker.ledger import LedgerStore, read_log, write_log

tmp = Path(tempfile.mkdtemp())
store, keys = random_chain(n_blocks=8, seed=0, path=tmp / "chain.log")
print("height", store.current_height(), "tip", store.tip_hash()[:16])
print(store.verify_chain())

# %% one byte in block 5
records = read_log(tmp / "chain.log")
rec = bytearray(records[5])
i = rec.index(b'"temperature":') + len(b'"temperature":')
rec[i] = ord("9") if rec[i] != ord("9") else ord("1")
records[5] = bytes(rec)
write_log(tmp / "chain.log", records)

report = LedgerStore.open(store.genesis, tmp / "chain.log", verify=False).verify_chain()
print(report.ok, report.failed_height, report.error)
