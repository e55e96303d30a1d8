"""Deterministic keys, contracts and chains for tests, demos and experiments."""

from __future__ import annotations

import hashlib
import random

from .contract import make_contract
from .crypto import KeyPair, ValidatorSet, generate_keypair
from .ledger import Block, BlockHeader, CommitSig, Genesis, LedgerStore, Transaction, merkle_root, vote_message


def seed_bytes(*parts) -> bytes:
    return hashlib.sha256(":".join(map(str, parts)).encode()).digest()


def keyring(n: int, seed=0, label="validator") -> list[KeyPair]:
    return [generate_keypair(seed_bytes(label, seed, i)) for i in range(n)]


def make_genesis(keys, chain_id="chainbroker-test", genesis_time=0) -> Genesis:
    return Genesis(chain_id, ValidatorSet.from_keypairs(keys), genesis_time)


def cold_chain_contract(seed=0, topics=("supply/+/temperature",), max_temp=8, max_humidity=60):
    """Three-party cold-chain agreement: temperature in [0, max_temp], humidity <= max_humidity."""
    holders = keyring(3, seed, "stakeholder")
    names = ["farm", "carrier", "retailer"]
    c = make_contract(
        list(zip(names, holders)),
        list(topics),
        [("temperature", "IN_RANGE", [0, max_temp]), ("humidity", "LE", max_humidity)],
        signers=holders,
    )
    return c, holders


def sign_block(block: Block, signers, round_=0) -> Block:
    sigs = tuple(
        CommitSig(kp.public_hex, kp.sign(vote_message("Precommit", block.height, round_, block.hash, kp.public_hex)).hex())
        for kp in signers
    )
    return Block(block.header, block.txs, round_, sigs)


def next_block(store: LedgerStore, txs, proposer: KeyPair, signers, ts=None) -> Block:
    tip = store.tip()
    header = BlockHeader(
        height=tip.height + 1,
        prev_hash=tip.hash,
        merkle_root=merkle_root(txs),
        proposer_id=proposer.public_hex,
        block_ts=ts if ts is not None else tip.header.block_ts + 1000,
        tx_count=len(txs),
    )
    return sign_block(Block(header, tuple(txs)), signers)


def random_chain(n_blocks=50, n_validators=4, seed=0, path=None, max_txs=5):
    """A valid chain of ``n_blocks`` blocks after genesis with random payloads.

    Returns ``(store, keys)``.
    """
    rng = random.Random(seed)
    keys = keyring(n_validators, seed)
    genesis = make_genesis(keys, chain_id=f"random-{seed}")
    store = LedgerStore.open(genesis, path)
    publisher = generate_keypair(seed_bytes("publisher", seed))
    contract_id = seed_bytes("contract", seed).hex()
    quorum = genesis.validators.quorum
    for h in range(1, n_blocks + 1):
        txs = []
        for j in range(rng.randint(1, max_txs)):
            payload = {
                "temperature": round(rng.uniform(-5, 15), 2),
                "humidity": rng.randint(10, 90),
                "seq": h * 100 + j,
                "note": rng.choice(["ok", "door open", "reefer", "late"]),
            }
            bound = rng.random() < 0.7
            tx = Transaction.create(
                publisher,
                f"supply/truck{rng.randint(1, 9)}/temperature",
                payload,
                publish_ts=h * 1000 + j,
                contract_id=contract_id if bound else None,
                verdict=rng.choice(["Approved", "Rejected"]) if bound else None,
            )
            txs.append(tx)
        signers = rng.sample(keys, rng.randint(quorum, len(keys)))
        signers.sort(key=lambda k: genesis.validators.index(k.public_hex))
        store.append_block(next_block(store, txs, keys[h % len(keys)], signers))
    return store, keys
