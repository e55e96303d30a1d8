"""Round-based BFT agreement on blocks: propose, prevote, precommit, commit.

The engine is a single-threaded state machine. Every input (proposal, vote,
timeout, submitted transaction) is handled to completion; outputs go through
a host object supplied by the caller:

    host.now() -> float ms            host.timestamp() -> int ms
    host.schedule(delay_ms, fn)       host.committed(block)
    host.broadcast_proposal(p)        host.broadcast_vote(v)
    host.broadcast_tx(tx)
    host.peer_behind(peer_id, height, round)   # peer sent a stale message
    host.peer_ahead(peer_id, height)           # we are missing blocks
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, replace

from . import crypto
from .contract import ContractRegistry, apply_committed, transaction_verdict
from .encoding import canonical_serialize
from .ledger import (
    Block,
    BlockDecodeError,
    BlockHeader,
    CommitSig,
    LedgerError,
    LedgerStore,
    Transaction,
    Verdict,
    merkle_root,
    vote_message,
)

log = logging.getLogger(__name__)


class ConsensusError(Exception):
    pass


class NotProposer(ConsensusError):
    pass


class DuplicateTx(ConsensusError):
    pass


class BadSignature(ConsensusError):
    pass


class MempoolFull(ConsensusError):
    pass


class Step(enum.IntEnum):
    NEW_HEIGHT = 0
    PROPOSE = 1
    PREVOTE = 2
    PRECOMMIT = 3


class VoteKind(str, enum.Enum):
    PREVOTE = "Prevote"
    PRECOMMIT = "Precommit"


class Transition(str, enum.Enum):
    LOCK = "lock"
    PREVOTE = "prevote"
    PRECOMMIT = "precommit"
    COMMIT = "commit"
    NEXT_ROUND = "next_round"
    SKIP_ROUND = "skip_round"


@dataclass
class ConsensusConfig:
    propose_timeout_ms: float = 300.0
    prevote_timeout_ms: float = 150.0
    precommit_timeout_ms: float = 150.0
    timeout_delta_ms: float = 100.0
    max_txs_per_block: int = 100
    mempool_capacity: int = 10_000
    create_empty_blocks: bool = False
    # pause between committing a block and starting the next height
    commit_timeout_ms: float = 0.0

    def timeout(self, step: Step, round_: int) -> float:
        base = {
            Step.PROPOSE: self.propose_timeout_ms,
            Step.PREVOTE: self.prevote_timeout_ms,
            Step.PRECOMMIT: self.precommit_timeout_ms,
        }[step]
        return base + self.timeout_delta_ms * round_


def proposer_for(validators: crypto.ValidatorSet, height: int, round_: int) -> str:
    return validators[(height + round_) % len(validators)].validator_id


def proposal_message(height: int, round_: int, block_hash: str) -> bytes:
    return canonical_serialize({"type": "proposal", "height": height, "round": round_, "block_hash": block_hash})


def _int(d, key):
    v = d.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise BlockDecodeError(f"{key} must be a non-negative integer")
    return v


@dataclass(frozen=True)
class Vote:
    kind: VoteKind
    height: int
    round: int
    block_hash: str | None
    voter_id: str
    signature: str

    @classmethod
    def create(cls, keypair, kind, height, round_, block_hash) -> Vote:
        kind = VoteKind(kind)
        sig = keypair.sign(vote_message(kind.value, height, round_, block_hash, keypair.public_hex))
        return cls(kind, height, round_, block_hash, keypair.public_hex, sig.hex())

    def verify(self) -> bool:
        msg = vote_message(self.kind.value, self.height, self.round, self.block_hash, self.voter_id)
        return crypto.verify_hex(self.voter_id, msg, self.signature)

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "height": self.height,
            "round": self.round,
            "block_hash": self.block_hash or "",
            "voter_id": self.voter_id,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, d) -> Vote:
        if not isinstance(d, dict) or set(d) != {"kind", "height", "round", "block_hash", "voter_id", "signature"}:
            raise BlockDecodeError("malformed vote")
        try:
            kind = VoteKind(d["kind"])
        except ValueError:
            raise BlockDecodeError("unknown vote kind") from None
        if not all(isinstance(d[k], str) for k in ("block_hash", "voter_id", "signature")):
            raise BlockDecodeError("malformed vote")
        return cls(kind, _int(d, "height"), _int(d, "round"), d["block_hash"] or None, d["voter_id"], d["signature"])


@dataclass(frozen=True)
class Proposal:
    height: int
    round: int
    block: Block
    proposer_id: str
    signature: str

    @classmethod
    def create(cls, keypair, height, round_, block) -> Proposal:
        sig = keypair.sign(proposal_message(height, round_, block.hash))
        return cls(height, round_, block, keypair.public_hex, sig.hex())

    def verify(self) -> bool:
        return crypto.verify_hex(self.proposer_id, proposal_message(self.height, self.round, self.block.hash), self.signature)

    def to_dict(self):
        return {
            "height": self.height,
            "round": self.round,
            "block": self.block.to_dict(),
            "proposer_id": self.proposer_id,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, d) -> Proposal:
        if not isinstance(d, dict) or set(d) != {"height", "round", "block", "proposer_id", "signature"}:
            raise BlockDecodeError("malformed proposal")
        if not isinstance(d["proposer_id"], str) or not isinstance(d["signature"], str):
            raise BlockDecodeError("malformed proposal")
        return cls(_int(d, "height"), _int(d, "round"), Block.from_dict(d["block"]), d["proposer_id"], d["signature"])


class ConsensusEngine:
    """Per-node consensus state for the height after the ledger tip."""

    def __init__(self, keypair: crypto.KeyPair, ledger: LedgerStore, registry: ContractRegistry, host, config=None):
        self.keypair = keypair
        self.node_id = keypair.public_hex
        self.ledger = ledger
        self.registry = registry
        self.host = host
        self.config = config or ConsensusConfig()
        self.validators = ledger.validators
        self.mempool: OrderedDict[str, Transaction] = OrderedDict()
        self._inflight: OrderedDict[str, Transaction] = OrderedDict()
        self._future: list = []
        self.equivocations: list = []
        self.height = ledger.current_height() + 1
        self.started = False
        self._reset_height()

    def _reset_height(self):
        self.round = 0
        self.step = Step.NEW_HEIGHT
        self.proposals: dict[int, Proposal] = {}
        self.blocks: dict[str, Block] = {}
        self.votes: dict[tuple, dict[str, Vote]] = {}
        self.locked_hash: str | None = None
        self.locked_round = -1
        self._voted: set = set()
        self._proposed: set = set()
        self._timers: set = set()
        self._validity: dict[str, str | None] = {}
        self.active = bool(self.mempool)

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        if not self.started:
            self.started = True
            self._enter_round(0)

    def is_proposer(self, round_=None) -> bool:
        r = self.round if round_ is None else round_
        return proposer_for(self.validators, self.height, r) == self.node_id

    def _enter_round(self, round_: int):
        if self._inflight:
            self._restore_inflight()
        self.round = round_
        self.step = Step.PROPOSE
        if self.active:
            self._arm(Step.PROPOSE)
        h = self.height
        self._try_propose()
        if self.height != h or self.round != round_:
            return
        p = self.proposals.get(round_)
        if p is not None and self.step == Step.PROPOSE:
            self._prevote_on(p)
            if self.height != h or self.round != round_:
                return
        self._evaluate_all()

    def _arm(self, step: Step):
        key = (self.height, self.round, step)
        if key in self._timers:
            return
        self._timers.add(key)
        h, r = self.height, self.round
        self.host.schedule(self.config.timeout(step, r), lambda: self.on_timeout(h, r, step))

    def _activate(self):
        if not self.active:
            self.active = True
            if self.step == Step.PROPOSE:
                self._arm(Step.PROPOSE)

    # -- mempool -----------------------------------------------------------

    def submit_transaction(self, tx: Transaction, gossip: bool = True) -> bool:
        """Admit a signed transaction to the mempool (the DeliverTransaction entry point)."""
        if tx.tx_id in self.mempool or tx.tx_id in self._inflight or self.ledger.has_tx(tx.tx_id):
            raise DuplicateTx(tx.tx_id)
        if not tx.is_well_formed():
            raise BadSignature(tx.tx_id)
        if len(self.mempool) + len(self._inflight) >= self.config.mempool_capacity:
            raise MempoolFull(tx.tx_id)
        self.mempool[tx.tx_id] = tx
        if gossip:
            self.host.broadcast_tx(tx)
        self._activate()
        if self.step == Step.PROPOSE:
            self._try_propose()
        return True

    # -- proposing ---------------------------------------------------------

    def _try_propose(self):
        if self.step != Step.PROPOSE or not self.is_proposer() or self.round in self._proposed:
            return
        if self.locked_hash is None and not self.mempool and not self.config.create_empty_blocks:
            return
        self.propose_block()

    def propose_block(self) -> Proposal:
        if not self.is_proposer():
            raise NotProposer(f"height {self.height} round {self.round}")
        if self.locked_hash is not None and self.locked_hash in self.blocks:
            block = self.blocks[self.locked_hash]
        else:
            block = self._build_block()
        self._proposed.add(self.round)
        p = Proposal.create(self.keypair, self.height, self.round, block)
        self.host.broadcast_proposal(p)
        self.on_proposal(p)
        return p

    def _build_block(self) -> Block:
        overlay = self.registry.copy()
        txs = []
        while self.mempool and len(txs) < self.config.max_txs_per_block:
            tx_id, tx = self.mempool.popitem(last=False)
            self._inflight[tx_id] = tx
            if self.ledger.has_tx(tx_id):
                continue
            tx = tx.with_verdict(transaction_verdict(overlay, tx))
            apply_committed(overlay, tx)
            txs.append(tx)
        tip = self.ledger.tip()
        header = BlockHeader(
            height=self.height,
            prev_hash=tip.hash,
            merkle_root=merkle_root(txs),
            proposer_id=self.node_id,
            block_ts=max(int(self.host.timestamp()), tip.header.block_ts + 1),
            tx_count=len(txs),
        )
        return Block(header=header, txs=tuple(txs))

    def validate_block(self, block: Block) -> str | None:
        """Reason the block is unacceptable at this height, or None."""
        if block.hash in self._validity:
            return self._validity[block.hash]
        reason = self._check_block(block)
        self._validity[block.hash] = reason
        return reason

    def _check_block(self, block: Block) -> str | None:
        hdr = block.header
        tip = self.ledger.tip()
        if hdr.height != self.height:
            return "wrong height"
        if hdr.prev_hash != tip.hash:
            return "prev_hash does not link to tip"
        if hdr.proposer_id not in self.validators:
            return "proposer is not a validator"
        if hdr.block_ts <= tip.header.block_ts:
            return "timestamp not after parent"
        if block.commit_signatures:
            return "proposed block carries commit signatures"
        if not block.txs and not self.config.create_empty_blocks:
            return "empty block"
        if len(block.txs) > self.config.max_txs_per_block:
            return "too many transactions"
        if hdr.tx_count != len(block.txs) or merkle_root(block.txs) != hdr.merkle_root:
            return "merkle root mismatch"
        overlay = self.registry.copy()
        seen = set()
        for tx in block.txs:
            if tx.tx_id in seen or self.ledger.has_tx(tx.tx_id):
                return f"duplicate transaction {tx.tx_id[:8]}"
            seen.add(tx.tx_id)
            if not tx.is_well_formed():
                return f"bad transaction {tx.tx_id[:8]}"
            expected = transaction_verdict(overlay, tx)
            if tx.verdict is not expected:
                return f"verdict {tx.verdict.value} for {tx.tx_id[:8]}, expected {expected.value}"
            apply_committed(overlay, tx)
        return None

    # -- inputs ------------------------------------------------------------

    def _defer(self, height, peer_id, msg):
        if height == self.height + 1:
            if len(self._future) < 4096:
                self._future.append(msg)
        else:
            self.host.peer_ahead(peer_id, height)

    def on_proposal(self, p: Proposal) -> Vote | None:
        """Handle a proposal; returns the prevote cast in response, if any."""
        if p.height < self.height:
            self.host.peer_behind(p.proposer_id, p.height, p.round)
            return None
        if p.height > self.height:
            self._defer(p.height, p.proposer_id, p)
            return None
        authentic = p.proposer_id == proposer_for(self.validators, p.height, p.round) and p.verify()
        if authentic and p.round not in self.proposals:
            self.proposals[p.round] = p
            self.blocks.setdefault(p.block.hash, p.block.unsigned())
            self._activate()
        if self.step == Step.NEW_HEIGHT:
            return None
        if p.round != self.round or self.step != Step.PROPOSE:
            if authentic:
                self._evaluate_all()
            return None
        if not authentic:
            log.info("%s: proposal from wrong proposer at h=%d r=%d", self.node_id[:8], p.height, p.round)
            return self._cast_prevote(None)
        if self.proposals[p.round] is not p:
            return None
        return self._prevote_on(p)

    def _prevote_on(self, p: Proposal) -> Vote | None:
        h = p.block.hash
        if self.locked_hash is not None and h != self.locked_hash:
            return self._cast_prevote(None)
        reason = self.validate_block(p.block)
        if reason is not None:
            log.info("%s: rejecting proposal h=%d r=%d: %s", self.node_id[:8], p.height, p.round, reason)
            return self._cast_prevote(None)
        return self._cast_prevote(h)

    def _cast_prevote(self, block_hash) -> Vote | None:
        self.step = Step.PREVOTE
        self._arm(Step.PREVOTE)
        return self._cast(VoteKind.PREVOTE, block_hash)

    def _cast_precommit(self, block_hash) -> Vote | None:
        self.step = Step.PRECOMMIT
        self._arm(Step.PRECOMMIT)
        return self._cast(VoteKind.PRECOMMIT, block_hash)

    def _cast(self, kind: VoteKind, block_hash) -> Vote | None:
        key = (self.round, kind)
        if key in self._voted:
            return None
        self._voted.add(key)
        v = Vote.create(self.keypair, kind, self.height, self.round, block_hash)
        self.host.broadcast_vote(v)
        self.on_vote(v)
        return v

    def on_vote(self, v: Vote) -> Transition | None:
        if v.height < self.height:
            self.host.peer_behind(v.voter_id, v.height, v.round)
            return None
        if v.height > self.height:
            self._defer(v.height, v.voter_id, v)
            return None
        if v.voter_id not in self.validators or not v.verify():
            return None
        bucket = self.votes.setdefault((v.round, v.kind), {})
        prior = bucket.get(v.voter_id)
        if prior is not None:
            if prior.block_hash != v.block_hash:
                self.equivocations.append((prior, v))
                log.warning("equivocation by %s at h=%d r=%d", v.voter_id[:8], v.height, v.round)
            return None
        bucket[v.voter_id] = v
        self._activate()
        if self.step == Step.NEW_HEIGHT:
            return None
        return self._evaluate(v.round)

    def tally(self, round_: int, kind: VoteKind) -> Counter:
        return Counter(v.block_hash for v in self.votes.get((round_, VoteKind(kind)), {}).values())

    def _evaluate_all(self):
        h = self.height
        for r in sorted({r for r, _ in self.votes}):
            t = self._evaluate(r)
            if self.height != h or t in (Transition.COMMIT, Transition.NEXT_ROUND, Transition.SKIP_ROUND):
                return

    def _evaluate(self, r: int) -> Transition | None:
        q = self.validators.quorum
        for h, c in self.tally(r, VoteKind.PRECOMMIT).items():
            if h is not None and c >= q and h in self.blocks:
                self._commit(h, r)
                return Transition.COMMIT
        result = None
        prevotes = self.tally(r, VoteKind.PREVOTE)
        for h, c in prevotes.items():
            if h is None or c < q or h not in self.blocks:
                continue
            if r > self.locked_round:
                self.locked_hash, self.locked_round = h, r
                result = Transition.LOCK
            if r == self.round and self.step in (Step.PROPOSE, Step.PREVOTE):
                self._cast_precommit(h)
                return Transition.PRECOMMIT
        if prevotes.get(None, 0) >= q and r == self.round and self.step in (Step.PROPOSE, Step.PREVOTE):
            self._cast_precommit(None)
            return Transition.PRECOMMIT
        if self.tally(r, VoteKind.PRECOMMIT).get(None, 0) >= q and r == self.round:
            self._enter_round(r + 1)
            return Transition.NEXT_ROUND
        if r > self.round:
            voters = set(self.votes.get((r, VoteKind.PREVOTE), {})) | set(self.votes.get((r, VoteKind.PRECOMMIT), {}))
            if len(voters) >= q:
                self._enter_round(r)
                return Transition.SKIP_ROUND
        return result

    def on_timeout(self, height: int, round_: int, step: Step):
        if (height, round_) != (self.height, self.round) or step != self.step:
            return None
        if step == Step.PROPOSE:
            self._cast_prevote(None)
            return Transition.PREVOTE
        if step == Step.PREVOTE:
            self._cast_precommit(None)
            return Transition.PRECOMMIT
        self._enter_round(round_ + 1)
        return Transition.NEXT_ROUND

    # -- commit ------------------------------------------------------------

    def _commit(self, block_hash: str, round_: int):
        block = self.blocks[block_hash]
        order = self.validators.index
        votes = sorted(
            (v for v in self.votes[(round_, VoteKind.PRECOMMIT)].values() if v.block_hash == block_hash),
            key=lambda v: order(v.voter_id),
        )
        full = replace(
            block,
            commit_round=round_,
            commit_signatures=tuple(CommitSig(v.voter_id, v.signature) for v in votes),
        )
        self.ledger.append_block(full)
        self._finalize(full)

    def apply_synced_block(self, block: Block) -> bool:
        """Append a block fetched from a peer during catch-up."""
        if block.height != self.height:
            return False
        try:
            self.ledger.append_block(block)
        except LedgerError as exc:
            log.warning("%s: rejected synced block %d: %s", self.node_id[:8], block.height, exc)
            return False
        self._finalize(block)
        return True

    def _finalize(self, block: Block):
        for tx in block.txs:
            self.mempool.pop(tx.tx_id, None)
            self._inflight.pop(tx.tx_id, None)
            apply_committed(self.registry, tx)
        self._restore_inflight()
        self.height = block.height + 1
        self._reset_height()
        self.host.committed(block)
        future, self._future = self._future, []
        for msg in future:
            if isinstance(msg, Proposal):
                self.on_proposal(msg)
            else:
                self.on_vote(msg)
        h = self.height
        self.host.schedule(self.config.commit_timeout_ms, lambda: self._start_height(h))

    def _restore_inflight(self):
        # proposed-but-uncommitted transactions go back to the front of the queue
        restored = OrderedDict(self._inflight)
        restored.update(self.mempool)
        self.mempool = restored
        self._inflight = OrderedDict()

    def _start_height(self, height: int):
        if self.height == height and self.step == Step.NEW_HEIGHT and self.started:
            self._enter_round(0)
