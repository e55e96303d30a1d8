"""Contracts bind topic filters to payload conditions.

Every payload on a bound topic gets a verdict. A rejected payload is still
recorded, only labelled differently.
"""

# %%
from chainbroker.contract import evaluate, match_topic
from chainbroker.fixtures import cold_chain_contract

contract, holders = cold_chain_contract(seed=0)
print([str(f) for f in contract.topics])
for c in contract.conditions:
    print(" ", c.field, c.op, c.operand)

# %%
for topic in ("supply/truck1/temperature", "supply/truck1/door", "supply/a/b/temperature"):
    print(topic, any(match_topic(f, topic) for f in contract.topics))

# %%
for payload in ({"temperature": 4.5, "humidity": 50}, {"temperature": 9.1, "humidity": 50}, {"humidity": 50}):
    print(payload, evaluate(contract, payload).value)
