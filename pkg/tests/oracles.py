"""Independent reference implementations used as test oracles."""

import hashlib
import itertools
import random

from chainbroker.ledger import Verdict

ALPHABET = ("a", "b", "c")


def all_topics(max_levels=4, alphabet=ALPHABET):
    for n in range(1, max_levels + 1):
        yield from ("/".join(p) for p in itertools.product(alphabet, repeat=n))


def filter_expansion(flt, max_levels=4, alphabet=ALPHABET):
    """Every topic of at most ``max_levels`` levels that ``flt`` should match, built by expansion."""
    levels = flt.split("/")
    out = set()
    if levels[-1] == "#":
        prefix = levels[:-1]
        heads = [ALPHABET if lv == "+" else (lv,) for lv in prefix]
        for head in itertools.product(*heads):
            for extra in range(1, max_levels - len(prefix) + 1):
                for tail in itertools.product(alphabet, repeat=extra):
                    out.add("/".join(head + tail))
        return out
    heads = [alphabet if lv == "+" else (lv,) for lv in levels]
    return {"/".join(p) for p in itertools.product(*heads)}


def random_filter(rng: random.Random, max_levels=4, alphabet=ALPHABET):
    n = rng.randint(1, max_levels)
    levels = [rng.choice(alphabet + ("+",)) for _ in range(n)]
    if rng.random() < 0.3:
        levels[-1] = "#"
    return "/".join(levels)


def _number(v):
    return type(v) in (int, float)


def verdict_oracle(conditions, payload) -> Verdict:
    """Check each (field, op, operand) triple on its own; any failure rejects."""
    for field, op, operand in conditions:
        if field not in payload:
            return Verdict.REJECTED
        v = payload[field]
        if op in ("EQ", "NE"):
            same_kind = (_number(v) and _number(operand)) or type(v) is type(operand)
            if not same_kind:
                return Verdict.REJECTED
            if op == "EQ" and not v == operand:
                return Verdict.REJECTED
            if op == "NE" and v == operand:
                return Verdict.REJECTED
            continue
        if not _number(v):
            return Verdict.REJECTED
        if op == "IN_RANGE":
            lo, hi = operand
            passed = lo <= v and v <= hi
        elif op == "LT":
            passed = v < operand
        elif op == "LE":
            passed = v <= operand
        elif op == "GT":
            passed = v > operand
        else:
            passed = v >= operand
        if not passed:
            return Verdict.REJECTED
    return Verdict.APPROVED


FIELDS = ("temperature", "humidity", "door", "site")


def random_scalar(rng):
    kind = rng.random()
    if kind < 0.35:
        return rng.randint(-5, 15)
    if kind < 0.7:
        return round(rng.uniform(-5, 15), rng.choice([0, 1, 2]))
    if kind < 0.85:
        return rng.choice([True, False])
    return rng.choice(["ok", "open", "x"])


def random_condition(rng):
    field = rng.choice(FIELDS)
    op = rng.choice(["LT", "LE", "GT", "GE", "EQ", "NE", "IN_RANGE"])
    if op == "IN_RANGE":
        a, b = sorted(rng.uniform(-5, 15) for _ in range(2))
        return (field, op, [round(a, 1), round(b, 1)])
    if op in ("EQ", "NE"):
        return (field, op, random_scalar(rng))
    return (field, op, rng.choice([rng.randint(-5, 15), round(rng.uniform(-5, 15), 1)]))


def random_payload(rng):
    return {f: random_scalar(rng) for f in FIELDS if rng.random() < 0.85}


def brute_merkle(leaves):
    if not leaves:
        return hashlib.sha256(b"").digest()
    level = [hashlib.sha256(b"\x00" + leaf).digest() for leaf in leaves]
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level), 2):
            if i + 1 < len(level):
                nxt.append(hashlib.sha256(b"\x01" + level[i] + level[i + 1]).digest())
            else:
                nxt.append(level[i])
        level = nxt
    return level[0]
