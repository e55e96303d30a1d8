import random

import pytest

from chainbroker.consensus import (
    BadSignature,
    ConsensusConfig,
    ConsensusEngine,
    DuplicateTx,
    MempoolFull,
    NotProposer,
    Proposal,
    Step,
    Transition,
    Vote,
    VoteKind,
    proposer_for,
)
from chainbroker.contract import ContractRegistry, contract_transaction, evaluate
from chainbroker.crypto import ValidatorSet
from chainbroker.ledger import Block, LedgerStore, Transaction, Verdict, merkle_root


class FakeHost:
    def __init__(self):
        self.t = 1000
        self.timers = []
        self.proposals, self.votes, self.gossip, self.blocks = [], [], [], []
        self.behind, self.ahead = [], []

    def now(self):
        return float(self.t)

    def timestamp(self):
        self.t += 1
        return self.t

    def schedule(self, delay, fn):
        self.timers.append((delay, fn))

    def broadcast_proposal(self, p):
        self.proposals.append(p)

    def broadcast_vote(self, v):
        self.votes.append(v)

    def broadcast_tx(self, tx):
        self.gossip.append(tx)

    def committed(self, block):
        self.blocks.append(block)

    def peer_behind(self, *a):
        self.behind.append(a)

    def peer_ahead(self, *a):
        self.ahead.append(a)


def engines(keys, genesis, config=None, registry_for=None):
    out = []
    for kp in keys:
        store = LedgerStore.open(genesis)
        reg = registry_for() if registry_for else ContractRegistry()
        e = ConsensusEngine(kp, store, reg, FakeHost(), config)
        e.start()
        out.append(e)
    return out


def load_then_propose(e, batch):
    """Fill the mempool first, then propose, instead of proposing on the first arrival."""
    step, e.step = e.step, Step.NEW_HEIGHT
    for tx in batch:
        e.submit_transaction(tx, gossip=False)
    e.step = step
    return e.propose_block()


def txs(publisher, n, start=0):
    return [Transaction.create(publisher, "free/topic", {"i": i}, publish_ts=i) for i in range(start, start + n)]


def test_proposer_rotation(keys4, genesis4):
    vs = genesis4.validators
    assert proposer_for(vs, 1, 0) == vs[1].validator_id
    assert proposer_for(vs, 1, 3) == vs[0].validator_id
    copies = [ValidatorSet.from_list(vs.to_list()) for _ in range(4)]
    rng = random.Random(0)
    for _ in range(1000):
        h, r = rng.randint(0, 10**6), rng.randint(0, 50)
        assert len({proposer_for(c, h, r) for c in copies}) == 1


def test_propose_drains_fifo_up_to_cap(keys4, genesis4, publisher):
    p = engines(keys4, genesis4)[1]  # proposer for height 1 round 0
    prop = load_then_propose(p, txs(publisher, 250))
    assert [t.payload["i"] for t in prop.block.txs] == list(range(100))
    assert len(p.mempool) == 150


def test_propose_block_with_three_txs(keys4, genesis4, publisher):
    e = engines(keys4, genesis4)[1]
    prop = load_then_propose(e, txs(publisher, 3))
    assert len(prop.block.txs) == 3 and not e.mempool
    assert prop.block.header.merkle_root == merkle_root(prop.block.txs)
    assert prop.verify()


def test_proposes_as_soon_as_work_arrives(keys4, genesis4, publisher):
    e = engines(keys4, genesis4)[1]
    assert not e.host.proposals
    e.submit_transaction(txs(publisher, 1)[0], gossip=False)
    assert len(e.host.proposals) == 1


def test_not_proposer(keys4, genesis4):
    with pytest.raises(NotProposer):
        engines(keys4, genesis4)[0].propose_block()


def _registered(cold_chain, publisher):
    c, _ = cold_chain

    def make():
        reg = ContractRegistry()
        reg.register_contract(c)
        return reg

    return c, make


def test_verdicts_stamped_by_proposer(keys4, genesis4, cold_chain, publisher):
    c, make = _registered(cold_chain, publisher)
    es = engines(keys4, genesis4, registry_for=make)
    bad = Transaction.create(publisher, "supply/t/temperature", {"temperature": 30, "humidity": 5}, 1,
                             contract_id=c.contract_id)
    good = Transaction.create(publisher, "supply/t/temperature", {"temperature": 3, "humidity": 5}, 2,
                              contract_id=c.contract_id)
    block = load_then_propose(es[1], [bad, good]).block
    got = {t.tx_id: t.verdict for t in block.txs}
    assert got[bad.tx_id] is Verdict.REJECTED is evaluate(c, bad)
    assert got[good.tx_id] is Verdict.APPROVED is evaluate(c, good)


def _proposal(es, publisher, n=3):
    return load_then_propose(es[1], txs(publisher, n))


def test_honest_proposal_gets_prevote(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    p = _proposal(es, publisher)
    v = es[0].on_proposal(p)
    assert v.kind is VoteKind.PREVOTE and v.block_hash == p.block.hash
    assert es[0].step is Step.PREVOTE


def test_forged_verdict_gets_nil(keys4, genesis4, cold_chain, publisher):
    c, make = _registered(cold_chain, publisher)
    es = engines(keys4, genesis4, registry_for=make)
    bad = Transaction.create(publisher, "supply/t/temperature", {"temperature": 30, "humidity": 5}, 1,
                             contract_id=c.contract_id)
    es[1].submit_transaction(bad, gossip=False)
    honest = es[1].host.proposals[-1].block
    forged_txs = tuple(t.with_verdict(Verdict.APPROVED) for t in honest.txs)
    from dataclasses import replace

    forged = Block(replace(honest.header, merkle_root=merkle_root(forged_txs)), forged_txs)
    fp = Proposal.create(es[1].keypair, 1, 0, forged)
    assert es[0].on_proposal(fp).block_hash is None
    assert "verdict" in es[0].validate_block(forged)


def test_wrong_proposer_gets_nil(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    es[1].submit_transaction(txs(publisher, 1)[0], gossip=False)
    block = es[1].host.proposals[-1].block
    imposter = Proposal.create(keys4[2], 1, 0, block)
    v = es[0].on_proposal(imposter)
    assert v is not None and v.block_hash is None


def test_bad_block_contents_get_nil(keys4, genesis4, publisher):
    from dataclasses import replace

    es = engines(keys4, genesis4)
    good = _proposal(es, publisher).block
    for broken in (
        Block(replace(good.header, prev_hash="ee" * 32), good.txs),
        Block(replace(good.header, tx_count=5), good.txs),
        Block(good.header, good.txs[::-1]),
        Block(replace(good.header, height=3), good.txs),
    ):
        assert es[0].validate_block(broken) is not None


def test_prevote_quorum_then_precommit_then_commit(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    p = _proposal(es, publisher)
    e = es[0]
    e.on_proposal(p)
    h = p.block.hash
    assert e.on_vote(Vote.create(keys4[1], "Prevote", 1, 0, h)) is None
    # a duplicate does not move the tally
    e.on_vote(Vote.create(keys4[1], "Prevote", 1, 0, h))
    assert e.tally(0, VoteKind.PREVOTE)[h] == 2
    assert e.on_vote(Vote.create(keys4[2], "Prevote", 1, 0, h)) is Transition.PRECOMMIT
    assert e.locked_hash == h
    assert e.host.votes[-1].kind is VoteKind.PRECOMMIT and e.host.votes[-1].block_hash == h
    e.on_vote(Vote.create(keys4[1], "Precommit", 1, 0, h))
    assert e.on_vote(Vote.create(keys4[2], "Precommit", 1, 0, h)) is Transition.COMMIT
    assert e.ledger.current_height() == 1 and e.height == 2
    block = e.ledger.get_block(1)
    assert block.hash == h and len(block.commit_signatures) == 3
    assert e.host.blocks == [block]


def test_nil_prevotes_lead_to_next_round(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    e = es[0]
    e.submit_transaction(txs(publisher, 1)[0], gossip=False)
    for k in keys4[1:]:
        e.on_vote(Vote.create(k, "Prevote", 1, 0, None))
    assert e.step is Step.PRECOMMIT and e.host.votes[-1].block_hash is None
    for k in keys4[1:3]:
        e.on_vote(Vote.create(k, "Precommit", 1, 0, None))
    assert e.round == 1


def test_timeouts(keys4, genesis4, publisher):
    cfg = ConsensusConfig()
    assert cfg.timeout(Step.PROPOSE, 1) > cfg.timeout(Step.PROPOSE, 0)
    assert cfg.timeout(Step.PRECOMMIT, 3) > cfg.timeout(Step.PRECOMMIT, 2)
    e = engines(keys4, genesis4)[0]
    assert e.host.timers == []  # idle until there is work
    e.submit_transaction(txs(publisher, 1)[0], gossip=False)
    assert e.on_timeout(1, 0, Step.PROPOSE) is Transition.PREVOTE
    assert e.host.votes[-1].block_hash is None
    assert e.on_timeout(1, 0, Step.PROPOSE) is None  # stale
    assert e.on_timeout(1, 0, Step.PREVOTE) is Transition.PRECOMMIT
    assert e.on_timeout(1, 0, Step.PRECOMMIT) is Transition.NEXT_ROUND
    assert e.round == 1 and e.step is Step.PROPOSE


def test_submission_errors(keys4, genesis4, publisher):
    e = engines(keys4, genesis4, ConsensusConfig(mempool_capacity=2))[0]
    a, b, c = txs(publisher, 3)
    assert e.submit_transaction(a)
    with pytest.raises(DuplicateTx):
        e.submit_transaction(a)
    from dataclasses import replace

    broken = replace(b, signature="00" * 64)
    with pytest.raises(BadSignature):
        e.submit_transaction(broken)
    assert broken not in e.host.gossip
    e.submit_transaction(b)
    with pytest.raises(MempoolFull):
        e.submit_transaction(c)
    assert e.host.gossip == [a, b]


def test_equivocation_recorded(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    p = _proposal(es, publisher)
    e = es[0]
    e.on_proposal(p)
    e.on_vote(Vote.create(keys4[3], "Prevote", 1, 0, p.block.hash))
    e.on_vote(Vote.create(keys4[3], "Prevote", 1, 0, None))
    assert len(e.equivocations) == 1
    assert e.tally(0, VoteKind.PREVOTE)[p.block.hash] == 2


def test_forged_vote_signature_ignored(keys4, genesis4, publisher):
    from dataclasses import replace

    es = engines(keys4, genesis4)
    p = _proposal(es, publisher)
    e = es[0]
    e.on_proposal(p)
    v = replace(Vote.create(keys4[2], "Prevote", 1, 0, p.block.hash), voter_id=keys4[3].public_hex)
    e.on_vote(v)
    assert keys4[3].public_hex not in e.votes[(0, VoteKind.PREVOTE)]


def test_message_round_trips(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    p = _proposal(es, publisher)
    assert Proposal.from_dict(p.to_dict()) == p
    for h in (p.block.hash, None):
        v = Vote.create(keys4[0], "Precommit", 1, 2, h)
        assert Vote.from_dict(v.to_dict()) == v and v.verify()


def test_stale_and_future_messages(keys4, genesis4, publisher):
    es = engines(keys4, genesis4)
    e = es[0]
    e.on_vote(Vote.create(keys4[2], "Prevote", 3, 0, None))
    assert e.host.ahead and e.host.ahead[-1][1] == 3
    e.on_vote(Vote.create(keys4[2], "Prevote", 0, 0, None))
    assert e.host.behind


def test_contract_registration_commits_and_updates_registry(keys4, genesis4, cold_chain, publisher):
    c, _ = cold_chain
    es = engines(keys4, genesis4)
    reg_tx = contract_transaction(publisher, c, 1)
    es[1].submit_transaction(reg_tx, gossip=False)
    p = es[1].host.proposals[-1]
    assert p.block.txs[0].verdict is Verdict.APPROVED
    e = es[0]
    e.on_proposal(p)
    for k in keys4[1:3]:
        e.on_vote(Vote.create(k, "Prevote", 1, 0, p.block.hash))
    for k in keys4[1:3]:
        e.on_vote(Vote.create(k, "Precommit", 1, 0, p.block.hash))
    assert c.contract_id in e.registry
    assert ContractRegistry.from_ledger(e.ledger) == e.registry
