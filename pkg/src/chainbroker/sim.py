"""Deterministic discrete-event network for in-process clusters.

Everything runs on one thread against a virtual millisecond clock. Given the
same seed and the same sequence of submitted events, deliveries happen in
exactly the same order at exactly the same virtual times.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field

from .net import Frame, TrafficMeter, decode_frame, encode_frame


@dataclass(frozen=True)
class Partition:
    start_ms: float
    end_ms: float
    nodes: frozenset

    def cuts(self, t: float, a, b) -> bool:
        return self.start_ms <= t < self.end_ms and ((a in self.nodes) != (b in self.nodes))


@dataclass
class SimNetConfig:
    seed: int = 0
    latency_min_ms: float = 1.0
    latency_max_ms: float = 10.0
    drop_prob: float = 0.0
    partitions: list = field(default_factory=list)
    # per directed link (src, dst) drop probability, overriding drop_prob
    link_drop: dict = field(default_factory=dict)
    # service time a node spends on each inbound frame; frames queue behind it
    processing_ms: float = 0.0
    record_trace: bool = False


class SimNetwork:
    def __init__(self, config: SimNetConfig | None = None):
        self.config = config or SimNetConfig()
        self.rng = random.Random(self.config.seed)
        self.clock = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self.handlers: dict = {}
        self.meters: dict = {}
        self.crashed: set = set()
        self._busy: dict = {}
        self.trace: list = []
        self.delivered = 0
        self.dropped = 0

    # -- wiring ------------------------------------------------------------

    def attach(self, node_id, handler):
        """``handler(frame, src_id)`` is called for every frame delivered to ``node_id``."""
        self.handlers[node_id] = handler
        self.meters[node_id] = TrafficMeter(node_id)
        self._busy[node_id] = 0.0

    def endpoint(self, node_id) -> SimEndpoint:
        return SimEndpoint(self, node_id)

    def crash(self, node_id):
        self.crashed.add(node_id)

    def alive(self, node_id) -> bool:
        return node_id not in self.crashed

    # -- scheduling --------------------------------------------------------

    def now(self) -> float:
        return self.clock

    def schedule(self, delay_ms: float, fn, owner=None):
        t = self.clock + max(0.0, delay_ms)
        heapq.heappush(self._queue, (t, next(self._seq), owner, fn))

    def at(self, t_ms: float, fn, owner=None):
        self.schedule(t_ms - self.clock, fn, owner)

    # -- transmission ------------------------------------------------------

    def _drop_prob(self, src, dst) -> float:
        return self.config.link_drop.get((src, dst), self.config.drop_prob)

    def send(self, src, dst, frame: Frame):
        if src in self.crashed:
            return
        wire = encode_frame(frame)
        self.meters[src].record_send(self.clock, frame)
        roll = self.rng.random()
        latency = self.rng.uniform(self.config.latency_min_ms, self.config.latency_max_ms)
        cut = any(p.cuts(self.clock, src, dst) for p in self.config.partitions)
        if cut or roll < self._drop_prob(src, dst) or dst not in self.handlers:
            self.dropped += 1
            if self.config.record_trace:
                self.trace.append((self.clock, "drop", src, dst, frame.type.name, frame.size))
            return
        self.schedule(latency, lambda: self._arrive(src, dst, wire))

    def broadcast(self, src, frame: Frame):
        for dst in self.handlers:
            if dst != src:
                self.send(src, dst, frame)

    def _arrive(self, src, dst, wire: bytes):
        if dst in self.crashed:
            return
        proc = self.config.processing_ms
        if proc <= 0:
            self._handle(src, dst, wire)
            return
        start = max(self.clock, self._busy[dst])
        self._busy[dst] = start + proc
        self.schedule(start + proc - self.clock, lambda: self._handle(src, dst, wire), owner=dst)

    def _handle(self, src, dst, wire: bytes):
        frame = decode_frame(wire)
        self.meters[dst].record_receive(self.clock, frame)
        self.delivered += 1
        if self.config.record_trace:
            self.trace.append((self.clock, "deliver", src, dst, frame.type.name, frame.size))
        self.handlers[dst](frame, src)

    # -- driving -----------------------------------------------------------

    def pending(self) -> int:
        return len(self._queue)

    def sim_step(self) -> list:
        """Run the next event. Returns the trace entries it produced."""
        while self._queue:
            t, _, owner, fn = heapq.heappop(self._queue)
            if owner is not None and owner in self.crashed:
                continue
            self.clock = max(self.clock, t)
            mark = len(self.trace)
            fn()
            return self.trace[mark:]
        return []

    def run(self, until_ms: float | None = None, stop=None, max_events: int | None = None) -> int:
        """Process events until the queue drains, ``until_ms`` passes, or ``stop()`` is true."""
        n = 0
        while self._queue:
            if until_ms is not None and self._queue[0][0] > until_ms:
                self.clock = max(self.clock, until_ms)
                break
            if max_events is not None and n >= max_events:
                break
            self.sim_step()
            n += 1
            if stop is not None and stop():
                break
        else:
            if until_ms is not None:
                self.clock = max(self.clock, until_ms)
        return n


class SimEndpoint:
    """The transport a node sees when attached to a :class:`SimNetwork`."""

    def __init__(self, net: SimNetwork, node_id):
        self.net = net
        self.node_id = node_id

    def now(self) -> float:
        return self.net.clock

    def timestamp(self) -> int:
        return int(self.net.clock)

    def schedule(self, delay_ms, fn):
        self.net.schedule(delay_ms, fn, owner=self.node_id)

    def broadcast(self, frame: Frame):
        self.net.broadcast(self.node_id, frame)

    def send(self, peer_id, frame: Frame):
        self.net.send(self.node_id, peer_id, frame)

    def record_commit(self):
        self.net.meters[self.node_id].record_commit(self.net.clock)

    @property
    def meter(self) -> TrafficMeter:
        return self.net.meters[self.node_id]
