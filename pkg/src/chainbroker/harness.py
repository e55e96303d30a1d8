"""Publish workloads, delay measurement and safety trials on simulated clusters.

``run_experiment`` registers a contract, publishes a fixed number of messages
at a fixed rate to one broker and records when each message reaches
subscribers, both on the immediate loopback path and on the post-commit
``_verified`` / ``_rejected`` path at the same and at a different broker.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cluster import SimCluster
from .consensus import ConsensusConfig
from .contract import REJECTED_SUFFIX, VERIFIED_SUFFIX, evaluate, parse_contract
from .crypto import generate_keypair, max_faulty
from .fixtures import cold_chain_contract, seed_bytes
from .ledger import Block, Verdict, merkle_root
from .net import write_traffic_csv
from .node import Node
from .sim import SimNetConfig

log = logging.getLogger(__name__)

DELAY_COLUMNS = ["node_count", "tps", "seed", "tx_id", "publish_ts", "deliver_ts", "delay_ms", "path", "broker"]


class Transport(str, enum.Enum):
    SIM = "sim"
    TCP = "tcp"


class DelayPath(str, enum.Enum):
    LOOPBACK = "loopback"
    COMMITTED = "committed"


class ExperimentAborted(RuntimeError):
    """A published transaction never reached its subscribers."""


@dataclass
class ExperimentConfig:
    node_count: int = 4
    tps: float = 5.0
    total_messages: int = 200
    transport: Transport = Transport.SIM
    seed: int = 0
    contract_path: str | None = None
    out: str | None = None
    latency_ms: float = 10.0
    processing_ms: float = 0.5
    loopback: bool = True
    publish_broker: int = 0
    remote_broker: int = 1
    drain_ms: float = 60_000.0
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)

    def __post_init__(self):
        self.transport = Transport(self.transport)
        if not self.tps > 0:
            raise ValueError("tps must be positive")
        if self.total_messages <= 0:
            raise ValueError("total_messages must be positive")
        if self.node_count < 2:
            raise ValueError("need at least two nodes for a remote subscriber")


@dataclass(frozen=True)
class DelayRecord:
    tx_id: str
    publish_ts: float
    deliver_ts: float
    path: DelayPath
    broker: int

    def __post_init__(self):
        if self.deliver_ts < self.publish_ts:
            raise ValueError(f"delivery before publish for {self.tx_id}")

    @property
    def delay_ms(self) -> float:
        return self.deliver_ts - self.publish_ts


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    blocks: int
    committed_txs: int
    bound_published: int
    loopback_published: int
    bytes_sent: int
    end_ms: float
    ledger_hashes: list
    delays_path: Path | None = None
    traffic_path: Path | None = None

    def delays(self, path: DelayPath, broker=None) -> np.ndarray:
        return np.array([r.delay_ms for r in self.records
                         if r.path == path and (broker is None or r.broker == broker)], dtype=float)


def load_contract(path):
    """Read a contract document (JSON) from ``path``."""
    with open(path, "rb") as f:
        return parse_contract(json.load(f))


def _payload(rng: random.Random, i: int) -> dict:
    return {"seq": i, "temperature": round(rng.uniform(-2.0, 11.0), 1), "humidity": rng.randint(30, 70)}


def _tx_of(received):
    prov = received.delivery.provenance
    return prov.get("tx_id") if prov else None


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    if cfg.transport is not Transport.SIM:
        from .tcp import run_tcp_experiment

        return run_tcp_experiment(cfg)
    rng = random.Random(cfg.seed)
    cluster = SimCluster(
        cfg.node_count,
        seed=cfg.seed,
        net_config=SimNetConfig(seed=cfg.seed, latency_min_ms=cfg.latency_ms, latency_max_ms=cfg.latency_ms,
                                processing_ms=cfg.processing_ms),
        consensus=cfg.consensus,
    )
    contract = load_contract(cfg.contract_path) if cfg.contract_path else cold_chain_contract(cfg.seed)[0]
    device = generate_keypair(seed_bytes("device", cfg.seed))

    pub = cluster.client(cfg.publish_broker, identity=device)
    local = cluster.client(cfg.publish_broker)
    remote = cluster.client(cfg.remote_broker)
    topic_filter = "supply/+/temperature"
    for c in (local, remote):
        c.subscribe(topic_filter + VERIFIED_SUFFIX)
        c.subscribe(topic_filter + REJECTED_SUFFIX)
    local.subscribe("raw/#")

    pub.publish("Contract", contract.to_document())
    if not cluster.run_until(lambda: all(contract.contract_id in n.registry for n in cluster.nodes), cfg.drain_ms):
        raise ExperimentAborted("contract registration did not commit")
    blocks_before = cluster.nodes[0].ledger.current_height()

    published: dict[str, float] = {}
    loop_sent: dict[int, float] = {}
    interval = 1000.0 / cfg.tps
    t0 = cluster.net.clock + interval

    def publish(i):
        payload = _payload(rng, i)
        receipt = pub.publish(f"supply/truck{i % 7}/temperature", payload)
        published[receipt.tx_id] = cluster.net.clock
        if cfg.loopback:
            loop_sent[i] = cluster.net.clock
            pub.publish(f"raw/truck{i % 7}/temperature", payload)

    for i in range(cfg.total_messages):
        cluster.net.at(t0 + i * interval, lambda i=i: publish(i))

    def done():
        return len(published) == cfg.total_messages and all(
            sum(1 for r in c.received if _tx_of(r) in published) >= cfg.total_messages
            for c in (local, remote)
        )

    deadline = t0 + cfg.total_messages * interval + cfg.drain_ms
    cluster.run(until_ms=deadline, stop=done)
    if not done():
        seen = {_tx_of(r) for r in remote.received}
        lost = [t for t in published if t not in seen]
        raise ExperimentAborted(f"{len(lost)} of {len(published)} transactions never delivered")
    end_ms = cluster.net.clock

    records = []
    for broker_idx, client in ((cfg.publish_broker, local), (cfg.remote_broker, remote)):
        for r in client.received:
            d = r.delivery
            tx_id = _tx_of(r)
            if tx_id in published:
                records.append(DelayRecord(tx_id, published[tx_id], r.t_ms, DelayPath.COMMITTED, broker_idx))
            elif d.topic.startswith("raw/"):
                i = d.payload["seq"]
                records.append(DelayRecord(f"loopback-{i}", loop_sent[i], r.t_ms, DelayPath.LOOPBACK, broker_idx))

    ledger = cluster.nodes[0].ledger
    committed = sum(1 for _, tx in ledger.transactions() if tx.tx_id in published)
    if committed != len(published):
        raise ExperimentAborted(f"ledger holds {committed} of {len(published)} transactions")
    result = ExperimentResult(
        config=cfg,
        records=records,
        blocks=ledger.current_height() - blocks_before,
        committed_txs=committed,
        bound_published=len(published),
        loopback_published=len(loop_sent),
        bytes_sent=sum(m.bytes_sent for m in cluster.net.meters.values()),
        end_ms=end_ms,
        ledger_hashes=ledger.block_hashes(),
    )
    if cfg.out:
        write_results(result, cluster, cfg.out)
    return result


def write_delays(result: ExperimentResult, path):
    cfg = result.config
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DELAY_COLUMNS)
        for r in result.records:
            w.writerow([cfg.node_count, cfg.tps, cfg.seed, r.tx_id, repr(r.publish_ts), repr(r.deliver_ts),
                        repr(r.delay_ms), r.path.value, r.broker])
    result.delays_path = Path(path)


def write_results(result: ExperimentResult, cluster, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_delays(result, out / "delays.csv")
    result.traffic_path = out / "traffic.csv"
    meters = [cluster.net.meters[n.node_id] for n in cluster.nodes]
    write_traffic_csv(result.traffic_path, meters, result.end_ms)


# -- summaries -------------------------------------------------------------


class SummaryError(ValueError):
    pass


@dataclass(frozen=True)
class SummaryRow:
    node_count: int
    tps: float
    path: str
    count: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    total_bytes: int | None
    blocks: int | None


def _read_delays(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise SummaryError(f"{path}: empty file")
        missing = set(DELAY_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise SummaryError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise SummaryError(f"{path}: no delay records")
    try:
        return [(int(r["node_count"]), float(r["tps"]), r["path"], float(r["delay_ms"])) for r in rows]
    except ValueError as exc:
        raise SummaryError(f"{path}: {exc}") from exc


def _read_traffic(path):
    last: dict[str, tuple] = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            last[r["node_id"]] = (int(r["bytes_sent"]), int(r["blocks_committed"]))
    if not last:
        raise SummaryError(f"{path}: no traffic rows")
    return sum(v[0] for v in last.values()), max(v[1] for v in last.values())


def summarize(paths) -> list[SummaryRow]:
    """Per (node_count, tps, path) delay statistics over one or more runs.

    Each entry of ``paths`` is a delays CSV or a directory holding
    ``delays.csv`` and, optionally, ``traffic.csv``.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    groups: dict[tuple, list] = {}
    traffic: dict[tuple, list] = {}
    for p in map(Path, paths):
        delays = p / "delays.csv" if p.is_dir() else p
        rows = _read_delays(delays)
        keys = set()
        for n, tps, path, d in rows:
            groups.setdefault((n, tps, path), []).append(d)
            keys.add((n, tps))
        tfile = delays.with_name("traffic.csv")
        if tfile.exists():
            stats = _read_traffic(tfile)
            for k in keys:
                traffic.setdefault(k, []).append(stats)
    out = []
    for (n, tps, path), ds in sorted(groups.items()):
        a = np.asarray(ds)
        t = traffic.get((n, tps))
        out.append(SummaryRow(
            n, tps, path, len(a), float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 95)),
            sum(x[0] for x in t) if t else None, sum(x[1] for x in t) if t else None,
        ))
    return out


def format_summary(rows) -> str:
    head = f"{'nodes':>5} {'tps':>6} {'path':<10} {'count':>6} {'mean_ms':>10} {'p50_ms':>10} {'p95_ms':>10} {'bytes':>12} {'blocks':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.node_count:>5} {r.tps:>6g} {r.path:<10} {r.count:>6} {r.mean_ms:>10.2f} {r.p50_ms:>10.2f} "
            f"{r.p95_ms:>10.2f} {'' if r.total_bytes is None else r.total_bytes:>12} "
            f"{'' if r.blocks is None else r.blocks:>7}"
        )
    return "\n".join(lines)


# -- safety trials -----------------------------------------------------------


@dataclass
class TrialResult:
    seed: int
    n: int
    crashed: list
    agreement: bool
    converged: bool
    lost: int
    verdict_mismatches: int
    ordering_ok: bool
    early_deliveries: int
    heights: list

    @property
    def ok(self) -> bool:
        return (self.agreement and self.converged and self.lost == 0 and self.verdict_mismatches == 0
                and self.ordering_ok and self.early_deliveries == 0)


def safety_trial(seed: int, n: int | None = None, messages: int = 6, latency=(1.0, 200.0),
                 crash_window_ms=3000.0, max_ms=120_000.0) -> TrialResult:
    """One randomized run with up to f crash faults.

    Checks that live ledgers agree, that every published transaction commits
    with the oracle verdict, and that every live broker delivered the
    ``_verified`` stream in ledger order and only after commit.
    """
    rng = random.Random(seed)
    n = n or rng.choice([4, 5, 7])
    cluster = SimCluster(n, seed=seed, net_config=SimNetConfig(seed=seed, latency_min_ms=latency[0],
                                                                latency_max_ms=latency[1]))
    contract, _ = cold_chain_contract(seed)
    device = generate_keypair(seed_bytes("device", seed))
    clients = [cluster.client(i) for i in range(n)]
    for c in clients:
        c.subscribe("supply/#")

    f = max_faulty(n)
    victims = rng.sample(range(n), rng.randint(0, f))
    for v in victims:
        cluster.net.at(rng.uniform(0, crash_window_ms), lambda v=v: cluster.crash(v))

    # publishers sit on brokers that never crash so their submissions are not lost with them
    healthy = [i for i in range(n) if i not in victims]
    first = cluster.client(healthy[0], identity=device)
    first.publish("Contract", contract.to_document())
    expected: dict[str, str] = {}

    def publish(i):
        c = cluster.client(rng.choice(healthy), identity=device)
        payload = _payload(rng, i)
        receipt = c.publish(f"supply/truck{i % 3}/temperature", payload)
        expected[receipt.tx_id] = evaluate(contract, payload).value

    # the contract must be registered before data can bind to it
    cluster.run_until(lambda: all(contract.contract_id in cluster.nodes[i].registry for i in healthy), max_ms)
    base = cluster.net.clock
    for i in range(messages):
        cluster.net.at(base + rng.uniform(0, 2000), lambda i=i: publish(i))

    live = [cluster.nodes[i] for i in healthy]

    def settled():
        return len(expected) == messages and all(
            all(n_.ledger.has_tx(t) for t in expected) for n_ in live
        )

    cluster.run(until_ms=base + max_ms, stop=settled)
    # let in-flight deliveries and sync settle
    cluster.run_until(cluster.converged, 10_000)

    lost = sum(1 for t in expected if not all(n_.ledger.has_tx(t) for n_ in live))
    ledger = live[0].ledger
    committed = {tx.tx_id: (h, tx) for h, tx in ledger.transactions()}
    mismatches = sum(1 for t, v in expected.items() if t in committed and committed[t][1].verdict.value != v)

    order = [tx.tx_id for _, tx in ledger.transactions() if tx.tx_id in expected]
    ordering_ok, early = True, 0
    for i in healthy:
        got = [r for r in clients[i].received if _tx_of(r) in expected]
        if [r.delivery.provenance["tx_id"] for r in got] != order:
            ordering_ok = False
        early += sum(1 for r in got if r.committed_height < r.delivery.provenance["height"])
        early += sum(1 for r in clients[i].received if not r.delivery.topic.endswith((VERIFIED_SUFFIX, REJECTED_SUFFIX)))
    return TrialResult(
        seed=seed, n=n, crashed=sorted(victims), agreement=cluster.agreement(), converged=cluster.converged(),
        lost=lost, verdict_mismatches=mismatches, ordering_ok=ordering_ok, early_deliveries=early,
        heights=cluster.heights(),
    )



# -- fault injection -----------------------------------------------------------


class ForgingNode(Node):
    """A Byzantine proposer that flips every verdict in the blocks it builds
    and prevotes for its own forgeries."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        engine = self.engine
        honest_build = engine._build_block
        flip = {Verdict.APPROVED: Verdict.REJECTED, Verdict.REJECTED: Verdict.APPROVED}

        def forged_build():
            block = honest_build()
            txs = tuple(tx.with_verdict(flip.get(tx.verdict, tx.verdict)) for tx in block.txs)
            header = replace(block.header, merkle_root=merkle_root(txs))
            return Block(header, txs)

        engine._build_block = forged_build
        engine.validate_block = lambda block: None


@dataclass
class ForgeryOutcome:
    forger: int
    height: int
    round0_prevotes: dict  # honest validator name -> prevoted hash or None
    forged_hash: str | None
    commit_round: int
    committed_verdict: str
    expected_verdict: str
    agreement: bool


def forging_trial(n=4, seed=0, payload=None) -> ForgeryOutcome:
    """Commit one data transaction at a height whose round-0 proposer forges verdicts."""
    payload = payload or {"temperature": 12.5, "humidity": 45}
    # height 1 carries the contract, height 2 the data; round 0 of height 2 belongs to validator 2
    forger = 2 % n
    classes = [ForgingNode if i == forger else Node for i in range(n)]
    cluster = SimCluster(n, seed=seed, net_config=SimNetConfig(seed=seed, latency_min_ms=5, latency_max_ms=20),
                         node_cls=classes)
    prevotes: dict = {}
    proposals: dict = {}
    for i, node in enumerate(cluster.nodes):
        if i == forger:
            continue
        engine = node.engine
        cast, on_proposal = engine._cast, engine.on_proposal

        def logged_cast(kind, block_hash, engine=engine, cast=cast, name=node.name):
            if engine.height == 2 and engine.round == 0 and kind.value == "Prevote":
                prevotes.setdefault(name, block_hash)
            return cast(kind, block_hash)

        def logged_proposal(p, on_proposal=on_proposal):
            if p.height == 2:
                proposals.setdefault(p.round, p.block.hash)
            return on_proposal(p)

        engine._cast, engine.on_proposal = logged_cast, logged_proposal

    contract, _ = cold_chain_contract(seed)
    honest = next(i for i in range(n) if i != forger)
    client = cluster.client(honest, identity=generate_keypair(seed_bytes("device", seed)))
    client.publish("Contract", contract.to_document())
    if not cluster.run_until(lambda: all(contract.contract_id in x.registry for x in cluster.nodes), 30_000):
        raise ExperimentAborted("contract registration did not commit")
    receipt = client.publish("supply/truck1/temperature", payload)
    if not cluster.run_until(lambda: cluster.committed(receipt.tx_id), 30_000):
        raise ExperimentAborted("data transaction did not commit")
    cluster.run_until(cluster.converged, 5_000)
    height, _ = cluster.nodes[honest].ledger.locate_tx(receipt.tx_id)
    block = cluster.nodes[honest].ledger.get_block(height)
    tx = next(t for t in block.txs if t.tx_id == receipt.tx_id)
    return ForgeryOutcome(
        forger=forger, height=height, round0_prevotes=prevotes, forged_hash=proposals.get(0),
        commit_round=block.commit_round, committed_verdict=tx.verdict.value,
        expected_verdict=evaluate(contract, payload).value, agreement=cluster.agreement(),
    )
