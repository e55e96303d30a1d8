"""Per-node publish/subscribe routing.

Publishes on topics without a contract are delivered immediately to local
subscribers only. Publishes on contract-bound topics become signed
transactions and reach subscribers, on every node, only after commit, under
``<topic>_verified`` or ``<topic>_rejected``.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field

from .contract import (
    CONTRACT_TOPIC,
    MULTI,
    REJECTED_SUFFIX,
    SINGLE,
    VERIFIED_SUFFIX,
    ContractRegistry,
    SignatureError,
    TopicFilter,
    contract_transaction,
    evaluate,
    is_reserved_topic,
    parse_contract,
    parse_topic,
    transaction_verdict,
    validate_contract_signatures,
)
from .ledger import Block, Transaction, Verdict, check_payload

log = logging.getLogger(__name__)


class BrokerError(ValueError):
    pass


class ReservedTopic(BrokerError):
    pass


class MissingIdentity(BrokerError):
    pass


class PublishPath(str, enum.Enum):
    LOOPBACK = "loopback"
    SUBMITTED = "submitted"
    CONTRACT_SUBMITTED = "contract_submitted"


@dataclass(frozen=True)
class PublishReceipt:
    path: PublishPath
    tx_id: str | None = None
    delivered: int = 0


@dataclass(frozen=True)
class Delivery:
    topic: str
    payload: dict
    provenance: dict | None = None  # height, tx_id, verdict for committed data

    def to_dict(self):
        d = {"topic": self.topic, "payload": self.payload}
        if self.provenance is not None:
            d["provenance"] = self.provenance
        return d


@dataclass
class ClientSession:
    session_id: int
    deliver: object  # callable(Delivery)
    identity: object = None  # KeyPair used to sign contract-bound publishes
    filters: set = field(default_factory=set)
    alive: bool = True


class _TrieNode:
    __slots__ = ("children", "sessions")

    def __init__(self):
        self.children: dict[str, _TrieNode] = {}
        self.sessions: set[int] = set()


class SubscriptionTable:
    """Topic-filter trie mapping filters to session ids."""

    def __init__(self):
        self._root = _TrieNode()

    def add(self, topic_filter, session_id: int):
        node = self._root
        for level in TopicFilter.parse(topic_filter).levels:
            node = node.children.setdefault(level, _TrieNode())
        node.sessions.add(session_id)

    def remove(self, topic_filter, session_id: int):
        path, node = [], self._root
        for level in TopicFilter.parse(topic_filter).levels:
            nxt = node.children.get(level)
            if nxt is None:
                return
            path.append((node, level))
            node = nxt
        node.sessions.discard(session_id)
        for parent, level in reversed(path):
            child = parent.children[level]
            if child.sessions or child.children:
                break
            del parent.children[level]

    def match(self, topic: str) -> set:
        levels = topic.split("/")
        out: set[int] = set()

        def walk(node, i):
            multi = node.children.get(MULTI)
            if multi is not None and i < len(levels):
                out.update(multi.sessions)
            if i == len(levels):
                out.update(node.sessions)
                return
            for key in (levels[i], SINGLE):
                child = node.children.get(key)
                if child is not None:
                    walk(child, i + 1)

        walk(self._root, 0)
        return out


class Broker:
    def __init__(self, registry: ContractRegistry, submit, timestamp, identity=None):
        self.registry = registry
        self.submit = submit
        self.timestamp = timestamp
        self.identity = identity
        self.sessions: dict[int, ClientSession] = {}
        self.table = SubscriptionTable()
        self._ids = itertools.count(1)

    def open_session(self, deliver, identity=None) -> ClientSession:
        s = ClientSession(next(self._ids), deliver, identity)
        self.sessions[s.session_id] = s
        return s

    def close_session(self, session: ClientSession):
        for f in list(session.filters):
            self.table.remove(f, session.session_id)
        session.filters.clear()
        session.alive = False
        self.sessions.pop(session.session_id, None)

    def subscribe(self, session: ClientSession, topic_filter) -> bool:
        f = str(TopicFilter.parse(topic_filter))
        if f not in session.filters:
            session.filters.add(f)
            self.table.add(f, session.session_id)
        return True

    def unsubscribe(self, session: ClientSession, topic_filter) -> bool:
        f = str(TopicFilter.parse(topic_filter))
        if f in session.filters:
            session.filters.discard(f)
            self.table.remove(f, session.session_id)
        return True

    def _route(self, delivery: Delivery) -> int:
        n = 0
        for sid in sorted(self.table.match(delivery.topic)):
            s = self.sessions.get(sid)
            if s is None or not s.alive:
                continue
            try:
                s.deliver(delivery)
                n += 1
            except Exception:  # a broken client must not stall the node
                log.exception("dropping delivery to dead session %d", sid)
                s.alive = False
        return n

    def publish(self, session: ClientSession, topic: str, payload) -> PublishReceipt:
        if topic == CONTRACT_TOPIC:
            return self.handle_contract_publish(session, payload)
        parse_topic(topic)
        if is_reserved_topic(topic):
            raise ReservedTopic(f"{topic!r} is reserved")
        payload = check_payload(payload)
        c = self.registry.lookup_contract(topic)
        if c is None:
            return PublishReceipt(PublishPath.LOOPBACK, None, self._route(Delivery(topic, payload)))
        identity = self._identity(session)
        tx = Transaction.create(
            identity, topic, payload, int(self.timestamp()), contract_id=c.contract_id, verdict=evaluate(c, payload)
        )
        self.submit(tx)
        return PublishReceipt(PublishPath.SUBMITTED, tx.tx_id)

    def handle_contract_publish(self, session: ClientSession, document) -> PublishReceipt:
        c = parse_contract(document)
        if not validate_contract_signatures(c):
            raise SignatureError("contract lacks a valid signature from every stakeholder")
        tx = contract_transaction(self._identity(session), c, int(self.timestamp()))
        tx = tx.with_verdict(transaction_verdict(self.registry, tx))
        self.submit(tx)
        return PublishReceipt(PublishPath.CONTRACT_SUBMITTED, tx.tx_id)

    def _identity(self, session):
        identity = session.identity or self.identity
        if identity is None:
            raise MissingIdentity("contract-bound publish needs a signing identity")
        return identity

    def on_commit(self, block: Block) -> list:
        """Republish committed contract-bound transactions in block order."""
        out = []
        for tx in block.txs:
            if tx.verdict is Verdict.UNCHECKED:
                continue
            suffix = VERIFIED_SUFFIX if tx.verdict is Verdict.APPROVED else REJECTED_SUFFIX
            d = Delivery(
                tx.topic + suffix,
                dict(tx.payload),
                {"height": block.height, "tx_id": tx.tx_id, "verdict": tx.verdict.value, "publish_ts": tx.publish_ts},
            )
            self._route(d)
            out.append(d)
        return out
