"""A validator node: ledger, contract registry, consensus engine and broker.

The node is transport-agnostic. A transport supplies ``now()``,
``timestamp()``, ``schedule(delay_ms, fn)``, ``broadcast(frame)``,
``send(peer_id, frame)`` and ``record_commit()``; frames arrive through
:meth:`Node.handle_peer_frame` and :meth:`Node.handle_client_frame`.
"""

from __future__ import annotations

import logging

from .broker import Broker, BrokerError, ClientSession, Delivery
from .consensus import ConsensusEngine, ConsensusError, Proposal, Vote
from .contract import ContractError, ContractRegistry
from .encoding import SerializationError
from .ledger import BadPayload, Block, Genesis, LedgerError, LedgerStore, Transaction
from .net import Frame, FrameType

log = logging.getLogger(__name__)

SYNC_RETRY_MS = 500.0


class ChainIdMismatch(Exception):
    """A peer serves a different chain."""


def error_frame(name: str, message: str = "") -> Frame:
    return Frame.make(FrameType.ERROR, {"error": name, "message": message})


class Node:
    def __init__(self, keypair, genesis: Genesis, transport, *, config=None, ledger_path=None, name=None):
        self.keypair = keypair
        self.genesis = genesis
        self.node_id = keypair.public_hex
        self.name = name or self.node_id[:8]
        self.transport = transport
        self.ledger = LedgerStore.open(genesis, ledger_path)
        self.registry = ContractRegistry.from_ledger(self.ledger)
        self.engine = ConsensusEngine(keypair, self.ledger, self.registry, host=self, config=config)
        self.broker = Broker(self.registry, submit=self.engine.submit_transaction, timestamp=transport.timestamp,
                             identity=keypair)
        self.commit_listeners: list = []
        self._sync_sent: dict = {}

    @property
    def height(self) -> int:
        return self.ledger.current_height()

    def start(self):
        self.engine.start()

    # -- consensus host ----------------------------------------------------

    def now(self) -> float:
        return self.transport.now()

    def timestamp(self) -> int:
        return self.transport.timestamp()

    def schedule(self, delay_ms, fn):
        self.transport.schedule(delay_ms, fn)

    def broadcast_proposal(self, p: Proposal):
        self.transport.broadcast(Frame.make(FrameType.PROPOSAL, p.to_dict()))

    def broadcast_vote(self, v: Vote):
        self.transport.broadcast(Frame.make(FrameType.VOTE, v.to_dict()))

    def broadcast_tx(self, tx: Transaction):
        self.transport.broadcast(Frame.make(FrameType.TX_GOSSIP, tx.to_dict()))

    def committed(self, block: Block):
        self.transport.record_commit()
        self.broker.on_commit(block)
        for fn in self.commit_listeners:
            fn(self, block)

    def _rate_ok(self, key) -> bool:
        t = self.now()
        last = self._sync_sent.get(key)
        if last is not None and t - last < SYNC_RETRY_MS:
            return False
        self._sync_sent[key] = t
        return True

    def peer_behind(self, peer_id, height, round_):
        # Only answer once the peer has moved past the round we committed in;
        # earlier stale votes are ordinary stragglers.
        if peer_id == self.node_id or peer_id not in self.ledger.validators:
            return
        block = self.ledger.get_block(height)
        if round_ <= block.commit_round or not self._rate_ok(("behind", peer_id, height)):
            return
        self.transport.send(peer_id, self._block_response(height))

    def peer_ahead(self, peer_id, height):
        if peer_id == self.node_id or peer_id not in self.ledger.validators:
            return
        want = self.engine.height
        if self._rate_ok(("ahead", peer_id, want)):
            self.transport.send(peer_id, Frame.make(FrameType.QUERY_BLOCK, {"height": want}))

    def _block_response(self, height) -> Frame:
        return Frame.make(
            FrameType.QUERY_RESP,
            {"height": self.ledger.current_height(), "block": self.ledger.get_block(height).to_dict()},
        )

    # -- ledger queries (GetCurrentBlockHeight / GetBlock) -----------------

    def query_height(self) -> int:
        return self.ledger.current_height()

    def query_block(self, height: int) -> Block:
        return self.ledger.get_block(height)

    # -- inbound frames ----------------------------------------------------

    def handle_peer_frame(self, frame: Frame, reply):
        """Process a frame from another validator. ``reply(frame)`` answers the sender."""
        try:
            self._dispatch_peer(frame, reply)
        except (SerializationError, LedgerError, ConsensusError, ContractError, BadPayload, KeyError,
                TypeError, ValueError) as exc:
            log.debug("%s: bad %s frame: %s", self.name, frame.type.name, exc)

    def _dispatch_peer(self, frame: Frame, reply):
        t = frame.type
        if t == FrameType.PROPOSAL:
            self.engine.on_proposal(Proposal.from_dict(frame.value()))
        elif t == FrameType.VOTE:
            self.engine.on_vote(Vote.from_dict(frame.value()))
        elif t == FrameType.TX_GOSSIP:
            tx = Transaction.from_dict(frame.value())
            try:
                self.engine.submit_transaction(tx, gossip=False)
            except ConsensusError:
                pass
        elif t == FrameType.QUERY_RESP:
            self._on_query_resp(frame.value(), reply)
        elif t in (FrameType.QUERY_HEIGHT, FrameType.QUERY_BLOCK):
            reply(self.answer_query(frame))
        elif t == FrameType.ERROR:
            body = frame.value()
            log.warning("%s: peer error %s: %s", self.name, body.get("error"), body.get("message"))

    def _on_query_resp(self, body, reply):
        if "block" in body:
            block = Block.from_dict(body["block"])
            if block.height == self.engine.height:
                self.engine.apply_synced_block(block)
        peer_height = body.get("height")
        if isinstance(peer_height, int) and peer_height >= self.engine.height:
            reply(Frame.make(FrameType.QUERY_BLOCK, {"height": self.engine.height}))

    def answer_query(self, frame: Frame) -> Frame:
        body = frame.value() if frame.body else {}
        if not isinstance(body, dict):
            return error_frame("BadRequest", "query body must be a map")
        chain_id = body.get("chain_id")
        if chain_id is not None and chain_id != self.genesis.chain_id:
            return error_frame("ChainIdMismatch", f"this node serves chain {self.genesis.chain_id!r}")
        if frame.type == FrameType.QUERY_HEIGHT:
            return Frame.make(
                FrameType.QUERY_RESP,
                {"height": self.ledger.current_height(), "chain_id": self.genesis.chain_id, "node_id": self.node_id},
            )
        height = body.get("height")
        try:
            return self._block_response(height)
        except LedgerError as exc:
            return error_frame(type(exc).__name__, str(exc))

    def handle_client_frame(self, session: ClientSession, frame: Frame) -> Frame | None:
        """Process a client frame; returns the response frame to send back."""
        try:
            t = frame.type
            if t in (FrameType.QUERY_HEIGHT, FrameType.QUERY_BLOCK):
                return self.answer_query(frame)
            body = frame.value()
            if t == FrameType.SUBSCRIBE:
                self.broker.subscribe(session, body["filter"])
                return Frame.make(FrameType.ACK, {"ok": True})
            if t == FrameType.UNSUBSCRIBE:
                self.broker.unsubscribe(session, body["filter"])
                return Frame.make(FrameType.ACK, {"ok": True})
            if t == FrameType.PUBLISH:
                receipt = self.broker.publish(session, body["topic"], body["payload"])
                resp = {"ok": True, "path": receipt.path.value, "delivered": receipt.delivered}
                if receipt.tx_id:
                    resp["tx_id"] = receipt.tx_id
                return Frame.make(FrameType.ACK, resp)
            return error_frame("BadRequest", f"unexpected {t.name} frame from client")
        except (BrokerError, ContractError, ConsensusError, BadPayload, LedgerError) as exc:
            return error_frame(type(exc).__name__, str(exc))
        except (SerializationError, KeyError, TypeError) as exc:
            return error_frame("BadRequest", str(exc))


def delivery_frame(d: Delivery) -> Frame:
    return Frame.make(FrameType.DELIVER, d.to_dict())
