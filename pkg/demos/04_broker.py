"""Two brokers, two kinds of topics.

Unbound topics are delivered straight away by the local broker. Topics a
contract covers are held back until their block commits, then delivered on
every broker with a ``_verified`` or ``_rejected`` suffix and the ledger
coordinates attached.
"""

# %%
from chainbroker.cluster import SimCluster
from chainbroker.fixtures import cold_chain_contract

cluster = SimCluster(4, seed=2)
contract, _ = cold_chain_contract(2)
cluster.client(0).publish("Contract", contract.to_document())
cluster.run_until(lambda: all(contract.contract_id in n.registry for n in cluster.nodes))

here, there = cluster.client(0), cluster.client(3)
for c in (here, there):
    c.subscribe("#")

# %%
print(here.publish("lab/bench/temp", {"t": 21}).path.value)
print(here.publish("supply/truck1/temperature", {"temperature": 3.9, "humidity": 44}).path.value)
print(here.publish("supply/truck2/temperature", {"temperature": 12.0, "humidity": 44}).path.value)
print("before commit:", here.topics(), there.topics())

# %%
cluster.run_for(2_000)
for r in there.received:
    p = r.delivery.provenance
    print(round(r.t_ms), r.delivery.topic, p["height"], p["verdict"])
