import random

import pytest
from oracles import all_topics, random_filter

from chainbroker.broker import Broker, MissingIdentity, PublishPath, ReservedTopic, SubscriptionTable
from chainbroker.contract import ContractRegistry, FilterError, SignatureError, make_contract, match_topic
from chainbroker.fixtures import keyring
from chainbroker.ledger import BadPayload, Block, BlockHeader, Verdict, merkle_root


class Harness:
    def __init__(self, registry=None, identity=None):
        self.submitted = []
        self.registry = registry or ContractRegistry()
        self.broker = Broker(self.registry, self.submitted.append, timestamp=lambda: 1234, identity=identity)

    def session(self, identity=None):
        got = []
        s = self.broker.open_session(got.append, identity)
        return s, got


def _block(txs, height=1):
    header = BlockHeader(height, "00" * 32, merkle_root(txs), "11" * 32, 5, len(txs))
    return Block(header, tuple(txs))


def test_subscription_table_matches_oracle():
    rng = random.Random(5)
    table = SubscriptionTable()
    filters = {}
    for sid in range(40):
        f = random_filter(rng)
        filters[sid] = f
        table.add(f, sid)
    for topic in all_topics():
        assert table.match(topic) == {s for s, f in filters.items() if match_topic(f, topic)}
    for sid in range(0, 40, 2):
        table.remove(filters[sid], sid)
    for topic in all_topics():
        assert table.match(topic) == {s for s, f in filters.items() if s % 2 and match_topic(f, topic)}


def test_subscribe_dedup_and_unsubscribe():
    h = Harness()
    s, got = h.session()
    h.broker.subscribe(s, "lab/+")
    h.broker.subscribe(s, "lab/+")
    r = h.broker.publish(s, "lab/temp", {"t": 1})
    assert r.path is PublishPath.LOOPBACK and r.delivered == 1 and len(got) == 1
    h.broker.unsubscribe(s, "lab/+")
    h.broker.publish(s, "lab/temp", {"t": 2})
    assert len(got) == 1
    with pytest.raises(FilterError):
        h.broker.subscribe(s, "a/#/b")


def test_loopback_is_local_and_unsubmitted():
    h = Harness()
    s, got = h.session()
    h.broker.subscribe(s, "#")
    h.broker.publish(s, "lab/temp", {"t": 1})
    assert got[0].topic == "lab/temp" and got[0].provenance is None
    assert h.submitted == []


def test_bound_publish_is_submitted_not_delivered(cold_chain):
    c, holders = cold_chain
    reg = ContractRegistry()
    reg.register_contract(c)
    h = Harness(reg, identity=holders[0])
    s, got = h.session()
    h.broker.subscribe(s, "supply/#")
    r = h.broker.publish(s, "supply/truck7/temperature", {"temperature": 4, "humidity": 50})
    assert r.path is PublishPath.SUBMITTED and r.delivered == 0 and got == []
    tx = h.submitted[0]
    assert tx.tx_id == r.tx_id and tx.contract_id == c.contract_id and tx.publish_ts == 1234
    assert tx.publisher_id == holders[0].public_hex


def test_bound_publish_needs_identity(cold_chain):
    c, _ = cold_chain
    reg = ContractRegistry()
    reg.register_contract(c)
    h = Harness(reg)
    s, _ = h.session()
    with pytest.raises(MissingIdentity):
        h.broker.publish(s, "supply/x/temperature", {"temperature": 1})


def test_contract_publish_path(cold_chain, publisher):
    c, holders = cold_chain
    h = Harness(identity=publisher)
    s, _ = h.session()
    r = h.broker.publish(s, "Contract", c.to_document())
    assert r.path is PublishPath.CONTRACT_SUBMITTED
    assert h.submitted[0].verdict is Verdict.APPROVED and h.submitted[0].topic == "Contract"
    # registration only happens at commit
    assert c.contract_id not in h.registry
    unsigned = make_contract([(f"s{i}", k) for i, k in enumerate(holders)], ["x"], [], signers=holders[:2])
    with pytest.raises(SignatureError):
        h.broker.publish(s, "Contract", unsigned.to_document())
    assert len(h.submitted) == 1


@pytest.mark.parametrize("topic", ["a/b_verified", "a_rejected"])
def test_reserved_topics_refused(topic):
    h = Harness()
    s, _ = h.session()
    with pytest.raises(ReservedTopic):
        h.broker.publish(s, topic, {"x": 1})


@pytest.mark.parametrize("topic", ["a/+", "a/#", "", "a//b"])
def test_wildcard_or_empty_publish_topics_refused(topic):
    h = Harness()
    s, _ = h.session()
    with pytest.raises(FilterError):
        h.broker.publish(s, topic, {"x": 1})


def test_bad_payload_refused():
    h = Harness()
    s, _ = h.session()
    with pytest.raises(BadPayload):
        h.broker.publish(s, "a", {"x": [1]})


def test_on_commit_routes_by_verdict_in_block_order(cold_chain, publisher):
    c, _ = cold_chain
    reg = ContractRegistry()
    reg.register_contract(c)
    h = Harness(reg, identity=publisher)
    s, got = h.session()
    h.broker.subscribe(s, "supply/+/temperature_verified")
    s2, rejected = h.session()
    h.broker.subscribe(s2, "supply/+/temperature_rejected")
    raw, raw_got = h.session()
    h.broker.subscribe(raw, "supply/+/temperature")
    for p in ({"temperature": 3, "humidity": 1}, {"temperature": 30, "humidity": 1}, {"temperature": 5, "humidity": 1}):
        h.broker.publish(s, "supply/t/temperature", p)
    block = _block(h.submitted, height=9)
    out = h.broker.on_commit(block)
    assert [d.provenance["tx_id"] for d in out] == [t.tx_id for t in block.txs]
    assert [d.payload["temperature"] for d in got] == [3, 5]
    assert [d.payload["temperature"] for d in rejected] == [30]
    assert all(d.provenance["height"] == 9 for d in got + rejected)
    assert got[0].provenance["verdict"] == "Approved" and rejected[0].provenance["verdict"] == "Rejected"
    assert raw_got == []


def test_dead_session_dropped(cold_chain):
    h = Harness()

    def boom(_):
        raise ConnectionError("gone")

    s = h.broker.open_session(boom)
    h.broker.subscribe(s, "x")
    assert h.broker.publish(s, "x", {"a": 1}).delivered == 0
    assert not s.alive
    ok, got = h.session()
    h.broker.subscribe(ok, "x")
    assert h.broker.publish(ok, "x", {"a": 1}).delivered == 1


def test_close_session_removes_subscriptions():
    h = Harness()
    s, got = h.session()
    h.broker.subscribe(s, "x")
    h.broker.close_session(s)
    assert h.broker.table.match("x") == set()
