"""Ed25519 identities, validator sets and quorum arithmetic."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

SECRET_KEY_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64


class FormatError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes

    @property
    def public_hex(self) -> str:
        return self.public.hex()

    def sign(self, message: bytes) -> bytes:
        return sign(self.secret, message)


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Deterministic when ``seed`` (32 bytes) is given, random otherwise."""
    if seed is None:
        seed = os.urandom(SECRET_KEY_SIZE)
    if len(seed) != SECRET_KEY_SIZE:
        raise FormatError(f"seed must be {SECRET_KEY_SIZE} bytes")
    sk = _private_key(bytes(seed))
    public = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(secret=bytes(seed), public=public)


@lru_cache(maxsize=1024)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@lru_cache(maxsize=4096)
def _public_key(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public)


def sign(secret: bytes, message: bytes) -> bytes:
    if len(secret) != SECRET_KEY_SIZE:
        raise FormatError(f"secret key must be {SECRET_KEY_SIZE} bytes")
    return _private_key(bytes(secret)).sign(bytes(message))


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    if len(public) != PUBLIC_KEY_SIZE:
        raise FormatError(f"public key must be {PUBLIC_KEY_SIZE} bytes")
    if len(signature) != SIGNATURE_SIZE:
        raise FormatError(f"signature must be {SIGNATURE_SIZE} bytes")
    return _verify_cached(bytes(public), bytes(message), bytes(signature))


# Verification is pure, so memoising it is safe; chain audits and simulated
# clusters check the same (key, message, signature) triples many times.
@lru_cache(maxsize=1 << 16)
def _verify_cached(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        _public_key(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_hex(public_hex: str, message: bytes, signature_hex: str) -> bool:
    """Hex-string front end to :func:`verify` that never raises on bad input."""
    try:
        return verify(bytes.fromhex(public_hex), message, bytes.fromhex(signature_hex))
    except (ValueError, TypeError):
        return False


def quorum_threshold(n: int) -> int:
    """Smallest vote count strictly greater than two thirds of ``n``."""
    if n < 1:
        raise DomainError("validator count must be at least 1")
    return (2 * n) // 3 + 1


def max_faulty(n: int) -> int:
    return (n - 1) // 3


@dataclass(frozen=True)
class Validator:
    validator_id: str  # hex public key
    name: str


class ValidatorSet:
    """Ordered, fixed membership. Order is the proposer rotation order."""

    def __init__(self, validators):
        self.validators = tuple(validators)
        if not self.validators:
            raise DomainError("validator set is empty")
        ids = [v.validator_id for v in self.validators]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate validator ids")
        self._index = {vid: i for i, vid in enumerate(ids)}

    @classmethod
    def from_keypairs(cls, keypairs, names=None):
        names = names or [f"node{i}" for i in range(len(keypairs))]
        return cls(Validator(kp.public_hex, name) for kp, name in zip(keypairs, names))

    def __len__(self):
        return len(self.validators)

    def __iter__(self):
        return iter(self.validators)

    def __getitem__(self, i):
        return self.validators[i]

    def __contains__(self, validator_id):
        return validator_id in self._index

    def __eq__(self, other):
        return isinstance(other, ValidatorSet) and self.validators == other.validators

    def index(self, validator_id: str) -> int:
        return self._index[validator_id]

    @property
    def ids(self):
        return [v.validator_id for v in self.validators]

    @property
    def quorum(self) -> int:
        return quorum_threshold(len(self.validators))

    def to_list(self):
        return [{"name": v.name, "public_key": v.validator_id} for v in self.validators]

    @classmethod
    def from_list(cls, items):
        return cls(Validator(item["public_key"], item["name"]) for item in items)
