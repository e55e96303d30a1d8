"""Asyncio TCP transport: validator peering, client sessions and node processes.

Every node listens on one port. The first frame on a connection decides its
role: a ``QueryHeight`` carrying a validator ``node_id`` and the right
``chain_id`` makes it a peer link, anything else makes it a client session.
Each node dials every peer in its static list and keeps reconnecting; frames
read from either direction go into the node's single event loop.
"""

from __future__ import annotations

import asyncio
import contextlib
import logging
import time
from dataclasses import dataclass, field

from .crypto import KeyPair, generate_keypair
from .ledger import Genesis
from .net import Frame, FrameDecoder, FrameError, FrameType, TrafficMeter, encode_frame
from .node import ChainIdMismatch, Node, delivery_frame, error_frame

log = logging.getLogger(__name__)

RECONNECT_MS = 200.0


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


def load_keypair(path) -> KeyPair:
    with open(path) as f:
        line = f.readline().strip()
    try:
        seed = bytes.fromhex(line)
    except ValueError as exc:
        raise ValueError(f"{path}: key file must hold a hex secret") from exc
    if len(seed) != 32:
        raise ValueError(f"{path}: secret must be 32 bytes")
    return generate_keypair(seed)


class Connection:
    """One framed stream. ``on_frame(conn, frame)`` runs for every frame read."""

    def __init__(self, reader, writer, meter: TrafficMeter, clock):
        self.reader = reader
        self.writer = writer
        self.meter = meter
        self.clock = clock
        self.peer_id: str | None = None
        self.closed = False

    def send(self, frame: Frame):
        if self.closed:
            return
        try:
            self.writer.write(encode_frame(frame))
        except (ConnectionError, RuntimeError):
            self.close()
            return
        self.meter.record_send(self.clock(), frame)

    async def frames(self):
        decoder = FrameDecoder()
        while not self.closed:
            try:
                data = await self.reader.read(65536)
            except (ConnectionError, asyncio.IncompleteReadError):
                break
            if not data:
                break
            try:
                batch = decoder.feed(data)
            except FrameError as exc:
                log.warning("closing connection after bad frame: %s", exc)
                self.send(error_frame(type(exc).__name__, str(exc)))
                break
            for frame in batch:
                self.meter.record_receive(self.clock(), frame)
                yield frame
        self.close()

    def close(self):
        if not self.closed:
            self.closed = True
            with contextlib.suppress(Exception):
                self.writer.close()


class TcpTransport:
    """The host side of a :class:`Node` running on an asyncio loop."""

    def __init__(self, node_id: str, loop=None):
        self.node_id = node_id
        self.loop = loop or asyncio.get_event_loop()
        self._t0 = time.monotonic()
        self.meter = TrafficMeter(node_id)
        self.peers: dict[str, Connection] = {}
        self._timers: set = set()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def timestamp(self) -> int:
        return int(time.time() * 1000)

    def schedule(self, delay_ms, fn):
        handle = self.loop.call_later(max(0.0, delay_ms) / 1000.0, self._fire, fn)
        self._timers.add(handle)

    def _fire(self, fn):
        try:
            fn()
        except Exception:
            log.exception("%s: timer callback failed", self.node_id[:8])

    def broadcast(self, frame: Frame):
        for conn in list(self.peers.values()):
            conn.send(frame)

    def send(self, peer_id, frame: Frame):
        conn = self.peers.get(peer_id)
        if conn is not None:
            conn.send(frame)

    def record_commit(self):
        self.meter.record_commit(self.now())

    def cancel_timers(self):
        for h in self._timers:
            h.cancel()
        self._timers.clear()


@dataclass
class NodeServer:
    """A node listening on TCP and peering with a static set of addresses."""

    keypair: KeyPair
    genesis: Genesis
    listen: str
    peers: list = field(default_factory=list)
    ledger_path: str | None = None
    config: object = None

    def __post_init__(self):
        self.node: Node | None = None
        self.transport: TcpTransport | None = None
        self._server = None
        self._tasks: set = set()
        self._conns: set = set()
        self.refused: dict[str, str] = {}
        self.stopped = asyncio.Event()

    @property
    def node_id(self) -> str:
        return self.keypair.public_hex

    async def start(self):
        loop = asyncio.get_running_loop()
        self.transport = TcpTransport(self.node_id, loop)
        self.node = Node(self.keypair, self.genesis, self.transport, config=self.config,
                         ledger_path=self.ledger_path)
        host, port = parse_addr(self.listen)
        self._server = await asyncio.start_server(self._accept, host, port)
        for addr in self.peers:
            self._spawn(self._dial(addr))
        self.node.start()
        log.info("%s listening on %s at height %d", self.node.name, self.listen, self.node.height)

    @property
    def port(self) -> int:
        return self._server.sockets[0].getsockname()[1]

    def _spawn(self, coro):
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    def _connection(self, reader, writer) -> Connection:
        conn = Connection(reader, writer, self.transport.meter, self.transport.now)
        self._conns.add(conn)
        return conn

    def _handshake(self) -> Frame:
        return Frame.make(FrameType.QUERY_HEIGHT, {"chain_id": self.genesis.chain_id, "node_id": self.node_id})

    # -- outbound peer links -------------------------------------------------

    async def _dial(self, addr: str):
        host, port = parse_addr(addr)
        while not self.stopped.is_set():
            try:
                reader, writer = await asyncio.open_connection(host, port)
            except OSError:
                await asyncio.sleep(RECONNECT_MS / 1000.0)
                continue
            conn = self._connection(reader, writer)
            conn.send(self._handshake())
            try:
                await self._peer_loop(conn, addr)
            except ChainIdMismatch as exc:
                self.refused[addr] = str(exc)
                log.error("%s: refusing peer %s: %s", self.node.name, addr, exc)
                conn.close()
                return
            if conn.peer_id and self.transport.peers.get(conn.peer_id) is conn:
                del self.transport.peers[conn.peer_id]
            await asyncio.sleep(RECONNECT_MS / 1000.0)

    async def _peer_loop(self, conn: Connection, addr: str):
        async for frame in conn.frames():
            if conn.peer_id is None:
                body = frame.value() if frame.body else {}
                if frame.type == FrameType.ERROR and body.get("error") == "ChainIdMismatch":
                    raise ChainIdMismatch(body.get("message", ""))
                if frame.type != FrameType.QUERY_RESP or body.get("chain_id") != self.genesis.chain_id:
                    raise ChainIdMismatch(f"unexpected handshake reply from {addr}")
                peer_id = body.get("node_id")
                if peer_id not in self.genesis.validators:
                    raise ChainIdMismatch(f"{addr} is not a validator of this chain")
                conn.peer_id = peer_id
                self.transport.peers[peer_id] = conn
            self.node.handle_peer_frame(frame, conn.send)

    # -- inbound connections ---------------------------------------------------

    async def _accept(self, reader, writer):
        conn = self._connection(reader, writer)
        session = None
        try:
            async for frame in conn.frames():
                if session is None and conn.peer_id is None:
                    if self._is_peer_hello(frame, conn):
                        continue
                    if conn.closed:
                        return
                    session = self.node.broker.open_session(lambda d: conn.send(delivery_frame(d)))
                if conn.peer_id is not None:
                    self.node.handle_peer_frame(frame, conn.send)
                else:
                    reply = self.node.handle_client_frame(session, frame)
                    if reply is not None:
                        conn.send(reply)
        finally:
            if session is not None:
                self.node.broker.close_session(session)
            if conn.peer_id and self.transport.peers.get(conn.peer_id) is conn:
                del self.transport.peers[conn.peer_id]
            self._conns.discard(conn)

    def _is_peer_hello(self, frame: Frame, conn: Connection) -> bool:
        if frame.type != FrameType.QUERY_HEIGHT:
            return False
        try:
            body = frame.value()
        except ValueError:
            return False
        if not isinstance(body, dict) or "node_id" not in body:
            return False
        reply = self.node.answer_query(frame)
        conn.send(reply)
        if reply.type == FrameType.ERROR:
            conn.close()
            return True
        if body["node_id"] not in self.genesis.validators:
            conn.send(error_frame("UnknownValidator", "node_id is not in the validator set"))
            conn.close()
            return True
        conn.peer_id = body["node_id"]
        # prefer our own outbound link for sending, but use this one until it exists
        self.transport.peers.setdefault(conn.peer_id, conn)
        return True

    async def stop(self):
        self.stopped.set()
        if self.transport:
            self.transport.cancel_timers()
        if self._server:
            self._server.close()
            with contextlib.suppress(Exception):
                await self._server.wait_closed()
        for conn in list(self._conns):
            conn.close()
        for task in list(self._tasks):
            task.cancel()
        for task in list(self._tasks):
            with contextlib.suppress(asyncio.CancelledError, Exception):
                await task


async def serve(server: NodeServer, stop: asyncio.Event | None = None):
    """Run ``server`` until ``stop`` is set (or forever)."""
    await server.start()
    try:
        await (stop or asyncio.Event()).wait()
    finally:
        await server.stop()


# -- clients -------------------------------------------------------------------


class BrokerClient:
    """A minimal framed client: subscribe, publish, and collect deliveries."""

    def __init__(self, reader, writer):
        self.reader, self.writer = reader, writer
        self.meter = TrafficMeter("client")
        self.conn = Connection(reader, writer, self.meter, self._now)
        self.replies: asyncio.Queue = asyncio.Queue()
        self.deliveries: list = []
        self.on_delivery = None
        self._reader_task = asyncio.ensure_future(self._read())

    @staticmethod
    def _now():
        return time.monotonic() * 1000.0

    @classmethod
    async def connect(cls, addr: str) -> BrokerClient:
        host, port = parse_addr(addr)
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer)

    async def _read(self):
        async for frame in self.conn.frames():
            if frame.type == FrameType.DELIVER:
                item = (self._now(), frame.value())
                self.deliveries.append(item)
                if self.on_delivery:
                    self.on_delivery(*item)
            else:
                await self.replies.put(frame)

    async def request(self, frame: Frame, timeout=10.0) -> dict:
        self.conn.send(frame)
        reply = await asyncio.wait_for(self.replies.get(), timeout)
        body = reply.value()
        if reply.type == FrameType.ERROR:
            raise RuntimeError(f"{body.get('error')}: {body.get('message')}")
        return body

    async def subscribe(self, topic_filter):
        return await self.request(Frame.make(FrameType.SUBSCRIBE, {"filter": topic_filter}))

    async def publish(self, topic, payload):
        return await self.request(Frame.make(FrameType.PUBLISH, {"topic": topic, "payload": payload}))

    async def height(self) -> int:
        return (await self.request(Frame.make(FrameType.QUERY_HEIGHT, {})))["height"]

    async def block(self, height: int) -> dict:
        return (await self.request(Frame.make(FrameType.QUERY_BLOCK, {"height": height})))["block"]

    async def close(self):
        self.conn.close()
        self._reader_task.cancel()
        with contextlib.suppress(asyncio.CancelledError, Exception):
            await self._reader_task


# -- local TCP clusters ----------------------------------------------------------


async def start_local_cluster(keys, genesis, base_dir=None, config=None, host="127.0.0.1"):
    """Start one :class:`NodeServer` per key on ephemeral localhost ports, fully meshed."""
    import socket

    ports = []
    for _ in keys:
        with socket.socket() as s:
            s.bind((host, 0))
            ports.append(s.getsockname()[1])
    addrs = [f"{host}:{p}" for p in ports]
    servers = []
    for i, kp in enumerate(keys):
        path = None if base_dir is None else f"{base_dir}/node{i}.log"
        peers = [a for j, a in enumerate(addrs) if j != i]
        servers.append(NodeServer(kp, genesis, addrs[i], peers, ledger_path=path, config=config))
    for s in servers:
        await s.start()
    return servers


async def wait_for(predicate, timeout=20.0, poll=0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        await asyncio.sleep(poll)
    return predicate()


def run_tcp_experiment(cfg):
    """Publish over real localhost sockets; delays are measured at the publisher's clock."""
    return asyncio.run(_tcp_experiment(cfg))


async def _tcp_experiment(cfg):
    import random as _random

    from .fixtures import cold_chain_contract, keyring, make_genesis
    from .harness import DelayPath, DelayRecord, ExperimentAborted, ExperimentResult, _payload, load_contract
    from .net import write_traffic_csv

    keys = keyring(cfg.node_count, cfg.seed)
    genesis = make_genesis(keys, "chainbroker-tcp", genesis_time=int(time.time() * 1000) - 1)
    servers = await start_local_cluster(keys, genesis, config=cfg.consensus)
    clients = []
    try:
        if not await wait_for(lambda: all(len(s.transport.peers) == cfg.node_count - 1 for s in servers), 10):
            raise ExperimentAborted("peers did not connect")
        contract = load_contract(cfg.contract_path) if cfg.contract_path else cold_chain_contract(cfg.seed)[0]
        pub = await BrokerClient.connect(servers[cfg.publish_broker].listen)
        local = await BrokerClient.connect(servers[cfg.publish_broker].listen)
        remote = await BrokerClient.connect(servers[cfg.remote_broker].listen)
        clients = [pub, local, remote]
        for c in (local, remote):
            await c.subscribe("supply/+/temperature_verified")
            await c.subscribe("supply/+/temperature_rejected")
        await local.subscribe("raw/#")
        await pub.publish("Contract", contract.to_document())
        if not await wait_for(lambda: all(contract.contract_id in s.node.registry for s in servers), 30):
            raise ExperimentAborted("contract registration did not commit")
        blocks_before = servers[0].node.height

        rng = _random.Random(cfg.seed)
        published: dict[str, float] = {}
        loop_sent: dict[int, float] = {}
        interval = 1.0 / cfg.tps
        start = time.monotonic()
        for i in range(cfg.total_messages):
            await asyncio.sleep(max(0.0, start + i * interval - time.monotonic()))
            payload = _payload(rng, i)
            t = BrokerClient._now()
            ack = await pub.publish(f"supply/truck{i % 7}/temperature", payload)
            published[ack["tx_id"]] = t
            if cfg.loopback:
                loop_sent[i] = BrokerClient._now()
                await pub.publish(f"raw/truck{i % 7}/temperature", payload)

        def got(c):
            return sum(1 for _, d in c.deliveries if (d.get("provenance") or {}).get("tx_id") in published)

        if not await wait_for(lambda: got(local) >= len(published) and got(remote) >= len(published),
                              cfg.drain_ms / 1000.0):
            raise ExperimentAborted(f"{len(published) - got(remote)} transactions never delivered")

        records = []
        for idx, c in ((cfg.publish_broker, local), (cfg.remote_broker, remote)):
            for t, d in c.deliveries:
                tx_id = (d.get("provenance") or {}).get("tx_id")
                if tx_id in published:
                    records.append(DelayRecord(tx_id, published[tx_id], t, DelayPath.COMMITTED, idx))
                elif d["topic"].startswith("raw/"):
                    i = d["payload"]["seq"]
                    records.append(DelayRecord(f"loopback-{i}", loop_sent[i], max(t, loop_sent[i]),
                                               DelayPath.LOOPBACK, idx))
        ledger = servers[0].node.ledger
        result = ExperimentResult(
            config=cfg, records=records, blocks=ledger.current_height() - blocks_before,
            committed_txs=sum(1 for _, tx in ledger.transactions() if tx.tx_id in published),
            bound_published=len(published), loopback_published=len(loop_sent),
            bytes_sent=sum(s.transport.meter.bytes_sent for s in servers),
            end_ms=servers[0].transport.now(), ledger_hashes=ledger.block_hashes(),
        )
        if cfg.out:
            from pathlib import Path

            from .harness import write_delays

            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            write_delays(result, out / "delays.csv")
            write_traffic_csv(out / "traffic.csv", [s.transport.meter for s in servers], result.end_ms)
        return result
    finally:
        for c in clients:
            await c.close()
        for s in servers:
            await s.stop()
