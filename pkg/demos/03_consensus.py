"""Four validators on a simulated network, one of which crashes.

The height whose proposer is down times out at round 0 and commits in a
later round; the other validators keep identical chains.
"""

# %%
from chainbroker.cluster import SimCluster
from chainbroker.fixtures import cold_chain_contract
from chainbroker.sim import SimNetConfig

cluster = SimCluster(4, seed=1, net_config=SimNetConfig(seed=1, latency_min_ms=5, latency_max_ms=40))
contract, _ = cold_chain_contract(1)
cluster.client(0).publish("Contract", contract.to_document())
cluster.run_until(lambda: all(contract.contract_id in n.registry for n in cluster.nodes))
print("contract committed at", round(cluster.net.clock), "ms, heights", cluster.heights())

# %% crash the proposer of the next height
h = cluster.nodes[0].ledger.current_height() + 1
cluster.crash(h % 4)
r = cluster.client((h + 1) % 4).publish("supply/truck3/temperature", {"temperature": 5.0, "humidity": 40})
cluster.run_until(lambda: cluster.committed(r.tx_id))
block = cluster.live_nodes()[0].ledger.get_block(h)
print("height", h, "committed in round", block.commit_round, "at", round(cluster.net.clock), "ms")
print("agreement:", cluster.agreement(), "heights:", cluster.heights())
