"""Topic filters, stakeholder-signed contracts and their condition evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

from . import crypto
from .encoding import SerializationError, canonical_deserialize, canonical_serialize, hex_digest, is_hex
from .ledger import Transaction, Verdict

CONTRACT_TOPIC = "Contract"
VERIFIED_SUFFIX = "_verified"
REJECTED_SUFFIX = "_rejected"
CONTRACT_DOMAIN = b"chainbroker/contract\x00"

SINGLE = "+"
MULTI = "#"


class ContractError(ValueError):
    pass


class SchemaError(ContractError):
    pass


class FilterError(ContractError):
    pass


class ConditionError(ContractError):
    pass


class SignatureError(ContractError):
    pass


class OverlapError(ContractError):
    pass


class AmbiguousBinding(ContractError):
    pass


# -- topics ------------------------------------------------------------------


@dataclass(frozen=True)
class TopicFilter:
    levels: tuple

    def __str__(self):
        return "/".join(self.levels)

    @classmethod
    def parse(cls, text) -> TopicFilter:
        if isinstance(text, TopicFilter):
            return text
        if not isinstance(text, str) or not text:
            raise FilterError("filter must be a non-empty string")
        levels = tuple(text.split("/"))
        for i, level in enumerate(levels):
            if not level:
                raise FilterError(f"empty level in {text!r}")
            if level == MULTI and i != len(levels) - 1:
                raise FilterError(f"'#' must be the last level in {text!r}")
            if level not in (SINGLE, MULTI) and (SINGLE in level or MULTI in level):
                raise FilterError(f"wildcard must fill a whole level in {text!r}")
        return cls(levels)

    @property
    def is_literal(self) -> bool:
        return not any(lv in (SINGLE, MULTI) for lv in self.levels)


def parse_topic(text) -> tuple:
    """Split a literal topic path, refusing wildcards and empty levels."""
    f = TopicFilter.parse(text)
    if not f.is_literal:
        raise FilterError(f"topic {text!r} may not contain wildcards")
    return f.levels


def match_topic(topic_filter, topic) -> bool:
    flt = TopicFilter.parse(topic_filter).levels
    levels = topic.split("/") if isinstance(topic, str) else tuple(topic)
    for i, f in enumerate(flt):
        if f == MULTI:
            return len(levels) > i
        if i >= len(levels):
            return False
        if f != SINGLE and f != levels[i]:
            return False
    return len(levels) == len(flt)


def filters_intersect(a, b) -> bool:
    """True if some literal topic is matched by both filters."""
    a = TopicFilter.parse(a).levels
    b = TopicFilter.parse(b).levels

    def go(i, j):
        if i == len(a) and j == len(b):
            return True
        if i < len(a) and a[i] == MULTI:
            return j < len(b)
        if j < len(b) and b[j] == MULTI:
            return i < len(a)
        if i == len(a) or j == len(b):
            return False
        if a[i] == SINGLE or b[j] == SINGLE or a[i] == b[j]:
            return go(i + 1, j + 1)
        return False

    return go(0, 0)


def is_reserved_topic(topic: str) -> bool:
    return topic == CONTRACT_TOPIC or topic.endswith(VERIFIED_SUFFIX) or topic.endswith(REJECTED_SUFFIX)


# -- conditions --------------------------------------------------------------

NUMERIC_OPS = {"LT", "LE", "GT", "GE", "IN_RANGE"}
ANY_OPS = {"EQ", "NE"}
OPS = NUMERIC_OPS | ANY_OPS


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _kind(v):
    if isinstance(v, bool):
        return "bool"
    if _is_number(v):
        return "number"
    if isinstance(v, str):
        return "string"
    return None


@dataclass(frozen=True)
class Condition:
    field: str
    op: str
    operand: object

    def __post_init__(self):
        if not isinstance(self.field, str) or not self.field:
            raise ConditionError("condition field must be a non-empty string")
        if self.op not in OPS:
            raise ConditionError(f"unknown operator {self.op!r}")
        if self.op == "IN_RANGE":
            pair = self.operand
            if not isinstance(pair, (list, tuple)) or len(pair) != 2 or not all(map(_is_number, pair)):
                raise ConditionError("IN_RANGE needs a [lo, hi] pair of numbers")
            if pair[0] > pair[1]:
                raise ConditionError("IN_RANGE needs lo <= hi")
            object.__setattr__(self, "operand", (pair[0], pair[1]))
        elif self.op in NUMERIC_OPS:
            if not _is_number(self.operand):
                raise ConditionError(f"{self.op} needs a numeric operand")
        elif _kind(self.operand) is None:
            raise ConditionError(f"{self.op} needs a scalar operand")

    def holds(self, payload: dict) -> bool:
        # Missing fields and type mismatches fail the condition rather than
        # raising, so every validator reaches the same answer.
        if self.field not in payload:
            return False
        v = payload[self.field]
        if self.op in NUMERIC_OPS:
            if not _is_number(v):
                return False
            if self.op == "IN_RANGE":
                lo, hi = self.operand
                return lo <= v <= hi
            x = self.operand
            return {"LT": v < x, "LE": v <= x, "GT": v > x, "GE": v >= x}[self.op]
        if _kind(v) != _kind(self.operand):
            return False
        return (v == self.operand) if self.op == "EQ" else (v != self.operand)

    def to_dict(self):
        operand = list(self.operand) if self.op == "IN_RANGE" else self.operand
        return {"field": self.field, "op": self.op, "operand": operand}


# -- contracts ---------------------------------------------------------------


@dataclass(frozen=True)
class Stakeholder:
    name: str
    public_key: str


@dataclass(frozen=True)
class SmartContract:
    stakeholders: tuple
    topics: tuple
    conditions: tuple
    signatures: tuple = ()  # (public_key_hex, signature_hex) pairs

    def __post_init__(self):
        if not self.topics:
            raise SchemaError("a contract must bind at least one topic")
        if not self.stakeholders:
            raise SchemaError("a contract needs at least one stakeholder")

    def terms(self) -> dict:
        """Everything except signatures; this is what contract_id commits to."""
        return {
            "stakeholders": [{"name": s.name, "public_key": s.public_key} for s in self.stakeholders],
            "topics": [str(t) for t in self.topics],
            "conditions": [c.to_dict() for c in self.conditions],
        }

    @cached_property
    def contract_id(self) -> str:
        return hex_digest(canonical_serialize(self.terms()))

    def to_document(self) -> dict:
        doc = self.terms()
        doc["signatures"] = [{"public_key": pk, "signature": sig} for pk, sig in self.signatures]
        return doc

    def to_bytes(self) -> bytes:
        return canonical_serialize(self.to_document())

    def signed_by(self, keypair) -> SmartContract:
        sig = keypair.sign(CONTRACT_DOMAIN + bytes.fromhex(self.contract_id)).hex()
        kept = tuple(s for s in self.signatures if s[0] != keypair.public_hex)
        return replace(self, signatures=kept + ((keypair.public_hex, sig),))

    def matches(self, topic: str) -> bool:
        return any(match_topic(f, topic) for f in self.topics)


def make_contract(stakeholders, topics, conditions, signers=()) -> SmartContract:
    """Convenience constructor. ``stakeholders`` is a list of (name, KeyPair or hex)."""
    holders = tuple(
        Stakeholder(name, key if isinstance(key, str) else key.public_hex) for name, key in stakeholders
    )
    conds = tuple(c if isinstance(c, Condition) else Condition(*c) for c in conditions)
    c = SmartContract(holders, tuple(TopicFilter.parse(t) for t in topics), conds)
    for kp in signers:
        c = c.signed_by(kp)
    return c


def parse_contract(document) -> SmartContract:
    """Build a contract from document bytes (canonical encoding) or a decoded map."""
    if isinstance(document, (bytes, bytearray)):
        try:
            document = canonical_deserialize(document)
        except SerializationError as exc:
            raise SchemaError(f"contract document is not canonical: {exc}") from None
    if not isinstance(document, dict):
        raise SchemaError("contract document must be a map")
    expected = {"stakeholders", "signatures", "topics", "conditions"}
    if set(document) != expected:
        raise SchemaError(f"contract fields must be exactly {sorted(expected)}")

    def items(key, fields):
        value = document[key]
        if not isinstance(value, list):
            raise SchemaError(f"{key} must be a list")
        for item in value:
            if fields and (not isinstance(item, dict) or set(item) != set(fields)):
                raise SchemaError(f"each {key} entry needs exactly {fields}")
        return value

    holders = []
    for s in items("stakeholders", ["name", "public_key"]):
        if not isinstance(s["name"], str) or not is_hex(s["public_key"], crypto.PUBLIC_KEY_SIZE):
            raise SchemaError("stakeholder needs a name and a hex public key")
        holders.append(Stakeholder(s["name"], s["public_key"]))
    sigs = []
    for s in items("signatures", ["public_key", "signature"]):
        if not is_hex(s["public_key"], crypto.PUBLIC_KEY_SIZE) or not is_hex(s["signature"], crypto.SIGNATURE_SIZE):
            raise SchemaError("signature entries need hex public_key and signature")
        sigs.append((s["public_key"], s["signature"]))
    topics = []
    for t in items("topics", None):
        if not isinstance(t, str):
            raise SchemaError("topics must be strings")
        topics.append(TopicFilter.parse(t))
    conds = []
    for c in items("conditions", ["field", "op", "operand"]):
        conds.append(Condition(c["field"], c["op"], c["operand"]))
    if len({h.public_key for h in holders}) != len(holders):
        raise SchemaError("duplicate stakeholder keys")
    try:
        return SmartContract(tuple(holders), tuple(topics), tuple(conds), tuple(sigs))
    except ConditionError:
        raise
    except ContractError as exc:
        raise SchemaError(str(exc)) from None


def validate_contract_signatures(c: SmartContract) -> bool:
    message = CONTRACT_DOMAIN + bytes.fromhex(c.contract_id)
    signed = {pk for pk, sig in c.signatures if crypto.verify_hex(pk, message, sig)}
    return all(s.public_key in signed for s in c.stakeholders)


def evaluate(c: SmartContract, tx_or_payload) -> Verdict:
    """Approved iff every condition holds over the payload."""
    payload = tx_or_payload.payload if isinstance(tx_or_payload, Transaction) else tx_or_payload
    if not isinstance(payload, dict):
        return Verdict.REJECTED
    return Verdict.APPROVED if all(cond.holds(payload) for cond in c.conditions) else Verdict.REJECTED


# -- registry ----------------------------------------------------------------


class ContractRegistry:
    """Contracts committed to the ledger, indexed for topic lookup."""

    def __init__(self):
        self._contracts: dict[str, SmartContract] = {}

    def __len__(self):
        return len(self._contracts)

    def __contains__(self, contract_id):
        return contract_id in self._contracts

    def __eq__(self, other):
        return isinstance(other, ContractRegistry) and set(self._contracts) == set(other._contracts)

    def ids(self):
        return sorted(self._contracts)

    def get(self, contract_id):
        return self._contracts.get(contract_id)

    def copy(self) -> ContractRegistry:
        r = ContractRegistry()
        r._contracts = dict(self._contracts)
        return r

    def lookup_contract(self, topic: str):
        found = [c for c in self._contracts.values() if c.matches(topic)]
        if len(found) > 1:
            raise AmbiguousBinding(f"{len(found)} contracts bind {topic!r}")
        return found[0] if found else None

    def overlapping(self, c: SmartContract):
        return [
            other
            for other in self._contracts.values()
            if other.contract_id != c.contract_id
            and any(filters_intersect(f, g) for f in c.topics for g in other.topics)
        ]

    def register_contract(self, c: SmartContract) -> str:
        cid = c.contract_id
        if cid in self._contracts:
            return cid
        if not validate_contract_signatures(c):
            raise SignatureError("contract lacks a valid signature from every stakeholder")
        if self.overlapping(c):
            raise OverlapError("contract topics intersect an existing contract")
        self._contracts[cid] = c
        return cid

    @classmethod
    def from_ledger(cls, store) -> ContractRegistry:
        reg = cls()
        for _, tx in store.transactions():
            apply_committed(reg, tx)
        return reg


def contract_transaction(keypair, c: SmartContract, publish_ts: int) -> Transaction:
    """Wrap a contract as a registration transaction on the reserved topic."""
    return Transaction.create(
        keypair,
        CONTRACT_TOPIC,
        {"document": c.to_bytes().decode("utf-8")},
        publish_ts,
        contract_id=c.contract_id,
    )


def contract_from_transaction(tx: Transaction) -> SmartContract:
    doc = tx.payload.get("document")
    if not isinstance(doc, str):
        raise SchemaError("registration payload lacks a document")
    return parse_contract(doc.encode("utf-8"))


def transaction_verdict(registry: ContractRegistry, tx: Transaction) -> Verdict:
    """The verdict every validator must reach for ``tx`` given ``registry``."""
    if tx.contract_id is None:
        return Verdict.UNCHECKED
    if tx.topic == CONTRACT_TOPIC:
        try:
            c = contract_from_transaction(tx)
        except ContractError:
            return Verdict.REJECTED
        if c.contract_id != tx.contract_id or not validate_contract_signatures(c):
            return Verdict.REJECTED
        if c.contract_id in registry:
            return Verdict.APPROVED
        return Verdict.REJECTED if registry.overlapping(c) else Verdict.APPROVED
    c = registry.get(tx.contract_id)
    if c is None or not c.matches(tx.topic):
        return Verdict.REJECTED
    return evaluate(c, tx)


def apply_committed(registry: ContractRegistry, tx: Transaction):
    """Registry side effect of a committed transaction."""
    if tx.topic == CONTRACT_TOPIC and tx.verdict is Verdict.APPROVED:
        registry.register_contract(contract_from_transaction(tx))
