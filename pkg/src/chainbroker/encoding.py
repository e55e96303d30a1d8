"""Canonical byte encoding shared by every hashed or signed structure.

All validators must hash identical bytes for identical values, so the
encoding is a strict subset of JSON: sorted keys, no whitespace, shortest
round-trip floats, and no nulls.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

HASH_NAME = "sha256"
DIGEST_SIZE = 32
ZERO_DIGEST = "00" * DIGEST_SIZE

_INT_MIN = -(2**63)
_INT_MAX = 2**63 - 1


class SerializationError(ValueError):
    pass


def _check(value: Any, path: str = "$") -> Any:
    # Returns a normalized copy (tuples become lists) after validating types.
    if isinstance(value, bool) or isinstance(value, str):
        return value
    if isinstance(value, int):
        if not _INT_MIN <= value <= _INT_MAX:
            raise SerializationError(f"{path}: integer outside 64-bit range")
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise SerializationError(f"{path}: non-finite number")
        return value
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise SerializationError(f"{path}: map key {k!r} is not a string")
            out[k] = _check(v, f"{path}.{k}")
        return out
    if isinstance(value, (list, tuple)):
        return [_check(v, f"{path}[{i}]") for i, v in enumerate(value)]
    raise SerializationError(f"{path}: unsupported type {type(value).__name__}")


def canonical_serialize(value: Any) -> bytes:
    """Encode ``value`` deterministically.

    Map keys are emitted in ascending code point order, which for UTF-8 is
    the same as ascending byte order.
    """
    normalized = _check(value)
    text = json.dumps(
        normalized,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise SerializationError(f"unencodable string: {exc}") from None


def _reject_constant(name):
    raise SerializationError(f"non-finite constant {name}")


def canonical_deserialize(data: bytes) -> Any:
    """Decode bytes produced by :func:`canonical_serialize`.

    Anything that would not re-encode to exactly the same bytes is refused,
    so a decoded value always has a single byte representation.
    """
    try:
        text = bytes(data).decode("utf-8")
        value = json.loads(text, parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise SerializationError(f"malformed encoding: {exc}") from None
    if canonical_serialize(value) != bytes(data):
        raise SerializationError("encoding is not canonical")
    return value


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hex_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_hex(value: Any, nbytes: int) -> bool:
    """True for lowercase hex strings encoding exactly ``nbytes`` bytes."""
    if not isinstance(value, str) or len(value) != 2 * nbytes:
        return False
    return all(c in "0123456789abcdef" for c in value)
