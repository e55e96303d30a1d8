"""Hash-chained block store with Merkle commitment over transactions."""

from __future__ import annotations

import enum
import logging
import os
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, replace
from functools import cached_property

from . import crypto
from .encoding import (
    HASH_NAME,
    ZERO_DIGEST,
    SerializationError,
    canonical_deserialize,
    canonical_serialize,
    digest,
    hex_digest,
    is_hex,
)

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
TX_DOMAIN = b"chainbroker/tx\x00"


class LedgerError(Exception):
    pass


class ChainMismatch(LedgerError):
    pass


class MerkleMismatch(LedgerError):
    pass


class QuorumNotMet(LedgerError):
    pass


class InvalidCommitSignature(LedgerError):
    pass


class InvalidTransaction(LedgerError):
    pass


class HeightOutOfRange(LedgerError):
    pass


class NoGenesis(LedgerError):
    pass


class BlockDecodeError(LedgerError):
    pass


class CorruptLedger(LedgerError):
    pass


class BadPayload(ValueError):
    pass


class Verdict(str, enum.Enum):
    APPROVED = "Approved"
    REJECTED = "Rejected"
    UNCHECKED = "Unchecked"


def _expect(d, keys, optional=(), what="record"):
    if not isinstance(d, dict):
        raise BlockDecodeError(f"{what}: expected a map")
    present = set(d)
    missing = set(keys) - present
    extra = present - set(keys) - set(optional)
    if missing or extra:
        raise BlockDecodeError(f"{what}: missing {sorted(missing)} extra {sorted(extra)}")


def _expect_int(value, what, minimum=0):
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise BlockDecodeError(f"{what}: expected integer >= {minimum}")
    return value


def _expect_hex(value, nbytes, what):
    if not is_hex(value, nbytes):
        raise BlockDecodeError(f"{what}: expected {nbytes}-byte lowercase hex")
    return value


def check_payload(payload) -> dict:
    """Payloads are flat maps from field name to number, string or boolean."""
    if not isinstance(payload, dict):
        raise BadPayload("payload must be a map")
    for k, v in payload.items():
        if not isinstance(k, str) or not k:
            raise BadPayload("payload field names must be non-empty strings")
        if not isinstance(v, (int, float, str, bool)):
            raise BadPayload(f"payload field {k!r} is not a scalar")
    try:
        canonical_serialize(payload)
    except SerializationError as exc:
        raise BadPayload(str(exc)) from None
    return dict(payload)


def tx_sign_message(tx_id: str) -> bytes:
    return TX_DOMAIN + bytes.fromhex(tx_id)


def _tx_body(topic, payload, publisher_id, publish_ts, contract_id):
    body = {
        "topic": topic,
        "payload": payload,
        "publisher_id": publisher_id,
        "publish_ts": publish_ts,
    }
    if contract_id is not None:
        body["contract_id"] = contract_id
    return body


def compute_tx_id(topic, payload, publisher_id, publish_ts, contract_id=None) -> str:
    return hex_digest(canonical_serialize(_tx_body(topic, payload, publisher_id, publish_ts, contract_id)))


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    topic: str
    payload: dict
    publisher_id: str
    publish_ts: int
    verdict: Verdict
    signature: str
    contract_id: str | None = None

    def __post_init__(self):
        if (self.verdict is Verdict.UNCHECKED) != (self.contract_id is None):
            raise InvalidTransaction("verdict must be Unchecked exactly when no contract is bound")

    @classmethod
    def create(cls, keypair, topic, payload, publish_ts, contract_id=None, verdict=None):
        payload = check_payload(payload)
        tx_id = compute_tx_id(topic, payload, keypair.public_hex, publish_ts, contract_id)
        if verdict is None:
            # provisional; the proposer stamps the verdict it computes
            verdict = Verdict.UNCHECKED if contract_id is None else Verdict.REJECTED
        return cls(
            tx_id=tx_id,
            topic=topic,
            payload=payload,
            publisher_id=keypair.public_hex,
            publish_ts=publish_ts,
            verdict=Verdict(verdict),
            signature=keypair.sign(tx_sign_message(tx_id)).hex(),
            contract_id=contract_id,
        )

    def with_verdict(self, verdict) -> Transaction:
        return replace(self, verdict=Verdict(verdict))

    def recompute_id(self) -> str:
        return compute_tx_id(self.topic, self.payload, self.publisher_id, self.publish_ts, self.contract_id)

    def signature_valid(self) -> bool:
        return crypto.verify_hex(self.publisher_id, tx_sign_message(self.tx_id), self.signature)

    def is_well_formed(self) -> bool:
        return self.recompute_id() == self.tx_id and self.signature_valid()

    def to_dict(self) -> dict:
        d = _tx_body(self.topic, self.payload, self.publisher_id, self.publish_ts, self.contract_id)
        d["tx_id"] = self.tx_id
        d["verdict"] = self.verdict.value
        d["signature"] = self.signature
        return d

    @classmethod
    def from_dict(cls, d) -> Transaction:
        _expect(
            d,
            ["tx_id", "topic", "payload", "publisher_id", "publish_ts", "verdict", "signature"],
            optional=["contract_id"],
            what="transaction",
        )
        if not isinstance(d["topic"], str):
            raise BlockDecodeError("transaction: topic must be a string")
        try:
            payload = check_payload(d["payload"])
            verdict = Verdict(d["verdict"])
        except (BadPayload, ValueError) as exc:
            raise BlockDecodeError(f"transaction: {exc}") from None
        contract_id = d.get("contract_id")
        if contract_id is not None:
            _expect_hex(contract_id, 32, "transaction.contract_id")
        try:
            return cls(
                tx_id=_expect_hex(d["tx_id"], 32, "transaction.tx_id"),
                topic=d["topic"],
                payload=payload,
                publisher_id=_expect_hex(d["publisher_id"], crypto.PUBLIC_KEY_SIZE, "transaction.publisher_id"),
                publish_ts=_expect_int(d["publish_ts"], "transaction.publish_ts"),
                verdict=verdict,
                signature=_expect_hex(d["signature"], crypto.SIGNATURE_SIZE, "transaction.signature"),
                contract_id=contract_id,
            )
        except InvalidTransaction as exc:
            raise BlockDecodeError(str(exc)) from None

    @cached_property
    def _canonical(self) -> bytes:
        return canonical_serialize(self.to_dict())

    def canonical_bytes(self) -> bytes:
        return self._canonical


def merkle_root(txs) -> str:
    """Binary hash tree over canonical transaction bytes.

    Leaves are H(0x00 || tx), inner nodes H(0x01 || left || right); an odd
    node at any level is carried up unchanged.
    """
    if not txs:
        return hex_digest(b"")
    level = [digest(b"\x00" + tx.canonical_bytes()) for tx in txs]
    while len(level) > 1:
        nxt = [digest(b"\x01" + level[i] + level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0].hex()


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: str
    merkle_root: str
    proposer_id: str
    block_ts: int
    tx_count: int

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "merkle_root": self.merkle_root,
            "proposer_id": self.proposer_id,
            "block_ts": self.block_ts,
            "tx_count": self.tx_count,
        }

    @classmethod
    def from_dict(cls, d) -> BlockHeader:
        _expect(d, ["height", "prev_hash", "merkle_root", "proposer_id", "block_ts", "tx_count"], what="header")
        return cls(
            height=_expect_int(d["height"], "header.height"),
            prev_hash=_expect_hex(d["prev_hash"], 32, "header.prev_hash"),
            merkle_root=_expect_hex(d["merkle_root"], 32, "header.merkle_root"),
            proposer_id=_expect_hex(d["proposer_id"], 32, "header.proposer_id"),
            block_ts=_expect_int(d["block_ts"], "header.block_ts"),
            tx_count=_expect_int(d["tx_count"], "header.tx_count"),
        )


def block_hash(header: BlockHeader) -> str:
    return hex_digest(canonical_serialize(header.to_dict()))


def vote_message(kind: str, height: int, round_: int, block_hash_: str | None, voter_id: str) -> bytes:
    """Bytes signed by a prevote or precommit. A nil vote carries an empty hash."""
    return canonical_serialize(
        {
            "type": "vote",
            "kind": kind,
            "height": height,
            "round": round_,
            "block_hash": block_hash_ or "",
            "voter_id": voter_id,
        }
    )


@dataclass(frozen=True)
class CommitSig:
    validator_id: str
    signature: str


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple
    commit_round: int = 0
    commit_signatures: tuple = ()

    @property
    def height(self) -> int:
        return self.header.height

    @cached_property
    def hash(self) -> str:
        return block_hash(self.header)

    def unsigned(self) -> Block:
        return replace(self, commit_round=0, commit_signatures=())

    def to_dict(self) -> dict:
        return {
            "header": self.header.to_dict(),
            "txs": [tx.to_dict() for tx in self.txs],
            "commit_round": self.commit_round,
            "commit_signatures": [
                {"validator_id": s.validator_id, "signature": s.signature} for s in self.commit_signatures
            ],
        }

    @classmethod
    def from_dict(cls, d) -> Block:
        _expect(d, ["header", "txs", "commit_round", "commit_signatures"], what="block")
        if not isinstance(d["txs"], list) or not isinstance(d["commit_signatures"], list):
            raise BlockDecodeError("block: txs and commit_signatures must be lists")
        sigs = []
        for s in d["commit_signatures"]:
            _expect(s, ["validator_id", "signature"], what="commit signature")
            sigs.append(
                CommitSig(
                    _expect_hex(s["validator_id"], crypto.PUBLIC_KEY_SIZE, "commit.validator_id"),
                    _expect_hex(s["signature"], crypto.SIGNATURE_SIZE, "commit.signature"),
                )
            )
        return cls(
            header=BlockHeader.from_dict(d["header"]),
            txs=tuple(Transaction.from_dict(t) for t in d["txs"]),
            commit_round=_expect_int(d["commit_round"], "block.commit_round"),
            commit_signatures=tuple(sigs),
        )

    def canonical_bytes(self) -> bytes:
        return canonical_serialize(self.to_dict())

    def body_bytes(self) -> bytes:
        """Header and transactions only; identical on every node for a height."""
        return canonical_serialize({"header": self.header.to_dict(), "txs": [t.to_dict() for t in self.txs]})

    @classmethod
    def decode(cls, data: bytes) -> Block:
        try:
            return cls.from_dict(canonical_deserialize(data))
        except SerializationError as exc:
            raise BlockDecodeError(str(exc)) from None


@dataclass(frozen=True)
class Genesis:
    chain_id: str
    validators: crypto.ValidatorSet
    genesis_time: int = 0
    hash_name: str = HASH_NAME

    def to_dict(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "genesis_time": self.genesis_time,
            "hash": self.hash_name,
            "validators": self.validators.to_list(),
        }

    @classmethod
    def from_dict(cls, d) -> Genesis:
        _expect(d, ["chain_id", "genesis_time", "hash", "validators"], what="genesis")
        if d["hash"] != HASH_NAME:
            raise BlockDecodeError(f"genesis: unsupported hash {d['hash']!r}")
        return cls(
            chain_id=d["chain_id"],
            validators=crypto.ValidatorSet.from_list(d["validators"]),
            genesis_time=_expect_int(d["genesis_time"], "genesis.genesis_time"),
        )

    def canonical_bytes(self) -> bytes:
        return canonical_serialize(self.to_dict())

    @property
    def digest(self) -> str:
        return hex_digest(self.canonical_bytes())

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.canonical_bytes())

    @classmethod
    def load(cls, path) -> Genesis:
        with open(path, "rb") as f:
            return cls.from_dict(canonical_deserialize(f.read()))


def genesis_block(genesis: Genesis) -> Block:
    # The genesis digest stands in as proposer so that the block binds the
    # chain id and validator set.
    header = BlockHeader(
        height=0,
        prev_hash=ZERO_DIGEST,
        merkle_root=merkle_root([]),
        proposer_id=genesis.digest,
        block_ts=genesis.genesis_time,
        tx_count=0,
    )
    return Block(header=header, txs=())


@dataclass
class VerificationReport:
    ok: bool
    checked: int
    failed_height: int | None = None
    error: str | None = None
    detail: str = ""

    def __str__(self):
        if self.ok:
            return f"ok ({self.checked} blocks)"
        return f"failed at height {self.failed_height}: {self.error} ({self.detail})"


def check_commit(block: Block, validators: crypto.ValidatorSet):
    """Raise unless the commit signatures form a valid quorum certificate."""
    valid, problems = set(), []
    for sig in block.commit_signatures:
        msg = vote_message("Precommit", block.height, block.commit_round, block.hash, sig.validator_id)
        if sig.validator_id not in validators:
            problems.append(f"{sig.validator_id[:8]} is not a validator")
        elif sig.validator_id in valid:
            problems.append(f"duplicate signature from {sig.validator_id[:8]}")
        elif not crypto.verify_hex(sig.validator_id, msg, sig.signature):
            problems.append(f"bad signature from {sig.validator_id[:8]}")
        else:
            valid.add(sig.validator_id)
    if len(valid) < validators.quorum:
        raise QuorumNotMet(f"{len(valid)} valid commit signatures, need {validators.quorum}")
    if problems:
        raise InvalidCommitSignature("; ".join(problems))


def check_block(block: Block, expected_height: int, prev_hash: str, validators):
    if block.header.height != expected_height:
        raise ChainMismatch(f"height {block.header.height}, expected {expected_height}")
    if block.header.prev_hash != prev_hash:
        raise ChainMismatch("prev_hash does not link to the previous block")
    if block.header.tx_count != len(block.txs):
        raise MerkleMismatch("tx_count does not match transaction list")
    if merkle_root(block.txs) != block.header.merkle_root:
        raise MerkleMismatch("merkle_root does not match transaction list")
    for i, tx in enumerate(block.txs):
        if not tx.is_well_formed():
            raise InvalidTransaction(f"transaction {i} has a bad id or signature")
    check_commit(block, validators)


def read_log(path) -> list:
    """Split a block log into record bodies. A torn final record is dropped."""
    with open(path, "rb") as f:
        data = f.read()
    records, pos = [], 0
    while pos < len(data):
        if pos + _LEN.size > len(data):
            log.warning("dropping torn record header at offset %d", pos)
            break
        (n,) = _LEN.unpack_from(data, pos)
        if pos + _LEN.size + n > len(data):
            log.warning("dropping torn record at offset %d", pos)
            break
        records.append(data[pos + _LEN.size : pos + _LEN.size + n])
        pos += _LEN.size + n
    return records


def write_log(path, records):
    with open(path, "wb") as f:
        for rec in records:
            f.write(_LEN.pack(len(rec)) + rec)


class LedgerStore:
    """Append-only, height-indexed block sequence.

    Only the consensus engine appends; readers may run concurrently and
    never see a half-appended block.
    """

    def __init__(self, genesis: Genesis, path=None, fsync: bool = False):
        self.genesis = genesis
        self.validators = genesis.validators
        self.path = path
        self.fsync = fsync
        self._records: list[bytes] = []
        self._blocks: list[Block | None] = []
        self._tx_index: dict[str, tuple[int, int]] = {}
        self.topic_index: dict[str, list[tuple[int, int]]] = defaultdict(list)
        self._lock = threading.Lock()

    @classmethod
    def open(cls, genesis: Genesis, path=None, *, verify: bool = True, fsync: bool = False) -> LedgerStore:
        """Load an existing log, or start a fresh chain at genesis."""
        store = cls(genesis, path, fsync)
        if path is not None and os.path.exists(path) and os.path.getsize(path) > 0:
            store._load(read_log(path))
            if verify:
                report = store.verify_chain()
                if not report.ok:
                    raise CorruptLedger(str(report))
        else:
            store.append_block(genesis_block(genesis))
        return store

    @classmethod
    def from_records(cls, genesis: Genesis, records) -> LedgerStore:
        """In-memory store over raw records, without validation (for audits)."""
        store = cls(genesis)
        store._load(records)
        return store

    def _load(self, records):
        for h, rec in enumerate(records):
            try:
                block = Block.decode(rec)
            except BlockDecodeError:
                block = None
            self._records.append(bytes(rec))
            self._blocks.append(block)
            if block is not None:
                self._index(block, h)

    def _index(self, block: Block, h: int):
        for i, tx in enumerate(block.txs):
            self._tx_index[tx.tx_id] = (h, i)
            self.topic_index[tx.topic].append((h, i))

    # queries

    def current_height(self) -> int:
        if not self._records:
            raise NoGenesis("ledger has no genesis block")
        return len(self._records) - 1

    def __len__(self):
        return len(self._records)

    def get_block(self, height: int) -> Block:
        with self._lock:
            if not isinstance(height, int) or height < 0 or height >= len(self._records):
                raise HeightOutOfRange(f"height {height} not in [0, {len(self._records) - 1}]")
            block = self._blocks[height]
        if block is None:
            raise BlockDecodeError(f"stored block {height} cannot be decoded")
        return block

    def raw_record(self, height: int) -> bytes:
        self.get_block(height)
        return self._records[height]

    @property
    def records(self) -> list:
        return list(self._records)

    def tip(self) -> Block:
        return self.get_block(self.current_height())

    def tip_hash(self) -> str:
        return self.tip().hash

    def has_tx(self, tx_id: str) -> bool:
        return tx_id in self._tx_index

    def locate_tx(self, tx_id: str):
        return self._tx_index.get(tx_id)

    def transactions(self):
        for h in range(len(self._records)):
            yield from ((h, tx) for tx in self.get_block(h).txs)

    def topic_history(self, topic: str):
        return [self.get_block(h).txs[i] for h, i in self.topic_index.get(topic, [])]

    def block_hashes(self) -> list:
        return [self.get_block(h).hash for h in range(len(self._records))]

    # mutation

    def append_block(self, block: Block) -> int:
        if not self._records:
            if block.canonical_bytes() != genesis_block(self.genesis).canonical_bytes():
                raise ChainMismatch("first block must be this chain's genesis block")
        else:
            height = self.current_height()
            check_block(block, height + 1, self.tip_hash(), self.validators)
        rec = block.canonical_bytes()
        if self.path is not None:
            with open(self.path, "ab") as f:
                f.write(_LEN.pack(len(rec)) + rec)
                f.flush()
                if self.fsync:
                    os.fsync(f.fileno())
        with self._lock:
            self._records.append(rec)
            self._blocks.append(block)
            self._index(block, len(self._records) - 1)
        return len(self._records) - 1

    # audit

    def verify_chain(self) -> VerificationReport:
        """Re-derive every link, Merkle root and commit quorum from raw records."""
        prev_hash = None
        for h, rec in enumerate(self._records):
            try:
                block = Block.decode(rec)
                if h == 0:
                    if rec != genesis_block(self.genesis).canonical_bytes():
                        raise ChainMismatch("genesis block does not match genesis file")
                else:
                    check_block(block, h, prev_hash, self.validators)
            except LedgerError as exc:
                return VerificationReport(False, h, h, type(exc).__name__, str(exc))
            prev_hash = block.hash
        if not self._records:
            return VerificationReport(False, 0, 0, "NoGenesis", "empty ledger")
        return VerificationReport(True, len(self._records))
