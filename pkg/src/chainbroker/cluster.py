"""In-process validator clusters on the simulated network."""

from __future__ import annotations

from dataclasses import dataclass, field

from .broker import Delivery
from .consensus import ConsensusConfig
from .fixtures import keyring, make_genesis
from .node import Node
from .sim import SimNetConfig, SimNetwork


@dataclass
class Received:
    t_ms: float
    delivery: Delivery
    committed_height: int  # local ledger height at delivery time


@dataclass
class SimClient:
    """A client attached directly to one broker, recording what it receives."""

    cluster: SimCluster
    node: Node
    identity: object = None
    received: list = field(default_factory=list)

    def __post_init__(self):
        self.session = self.node.broker.open_session(self._deliver, self.identity)

    def _deliver(self, d: Delivery):
        self.received.append(Received(self.cluster.net.clock, d, self.node.ledger.current_height()))

    def subscribe(self, topic_filter):
        return self.node.broker.subscribe(self.session, topic_filter)

    def unsubscribe(self, topic_filter):
        return self.node.broker.unsubscribe(self.session, topic_filter)

    def publish(self, topic, payload):
        return self.node.broker.publish(self.session, topic, payload)

    def topics(self):
        return [r.delivery.topic for r in self.received]


class SimCluster:
    def __init__(self, n: int, *, seed=0, net_config: SimNetConfig | None = None,
                 consensus: ConsensusConfig | None = None, chain_id="chainbroker-sim", node_cls=Node, start=True,
                 keys=None, genesis=None):
        self.keys = list(keys) if keys is not None else keyring(n, seed)
        self.genesis = genesis or make_genesis(self.keys, chain_id)
        if [k.public_hex for k in self.keys] != self.genesis.validators.ids:
            raise ValueError("keys do not match the genesis validator set")
        self.net = SimNetwork(net_config or SimNetConfig(seed=seed))
        self.nodes: list[Node] = []
        for i, kp in enumerate(self.keys):
            cls = node_cls[i] if isinstance(node_cls, (list, tuple)) else node_cls
            node = cls(kp, self.genesis, self.net.endpoint(kp.public_hex), config=consensus, name=f"node{i}")
            self.net.attach(kp.public_hex, self._handler(node))
            self.nodes.append(node)
        if start:
            self.start()

    def _handler(self, node):
        net = self.net

        def handle(frame, src):
            node.handle_peer_frame(frame, lambda f: net.send(node.node_id, src, f))

        return handle

    def start(self):
        for node in self.nodes:
            node.start()

    def __getitem__(self, i) -> Node:
        return self.nodes[i]

    def __len__(self):
        return len(self.nodes)

    def crash(self, i):
        self.net.crash(self.nodes[i].node_id)

    def is_alive(self, i) -> bool:
        return self.net.alive(self.nodes[i].node_id)

    def live_nodes(self) -> list[Node]:
        return [n for n in self.nodes if self.net.alive(n.node_id)]

    def client(self, i, identity=None) -> SimClient:
        return SimClient(self, self.nodes[i], identity)

    def run(self, until_ms=None, stop=None, max_events=None):
        return self.net.run(until_ms=until_ms, stop=stop, max_events=max_events)

    def run_for(self, ms):
        return self.net.run(until_ms=self.net.clock + ms)

    def run_until(self, predicate, max_ms=60_000.0) -> bool:
        """Advance until ``predicate()`` holds; False if the deadline passes first."""
        deadline = self.net.clock + max_ms
        if predicate():
            return True
        self.net.run(until_ms=deadline, stop=predicate)
        return predicate()

    def committed(self, tx_id, nodes=None) -> bool:
        return all(n.ledger.has_tx(tx_id) for n in (nodes or self.live_nodes()))

    def heights(self):
        return [n.ledger.current_height() for n in self.nodes]

    def converged(self) -> bool:
        """All live nodes share the same height and the same chain of block hashes."""
        live = self.live_nodes()
        tips = {(n.ledger.current_height(), n.ledger.tip_hash()) for n in live}
        return len(tips) == 1

    def agreement(self) -> bool:
        """No two nodes, live or crashed, hold different blocks at the same height."""
        chains = [n.ledger.block_hashes() for n in self.nodes]
        longest = max(len(c) for c in chains)
        for h in range(longest):
            seen = {c[h] for c in chains if len(c) > h}
            if len(seen) > 1:
                return False
        return True
