"""Command line entry points.

    chainbroker keygen     --nodes 4 --out net/
    chainbroker node       --genesis net/genesis.json --keys net/node0.key --listen 127.0.0.1:7000 \\
                           --peers 127.0.0.1:7001,127.0.0.1:7002,127.0.0.1:7003 --transport tcp
    chainbroker experiment --nodes 4,7 --tps 1,5 --messages 200 --seed 0 --out results/
    chainbroker summarize  results/*/
    chainbroker verify     --genesis net/genesis.json --ledger net/node0.log
"""

from __future__ import annotations

import argparse
import asyncio
import contextlib
import logging
import os
import signal
import sys
import time
from pathlib import Path

from .crypto import ValidatorSet, generate_keypair
from .fixtures import cold_chain_contract
from .ledger import Genesis, LedgerError, LedgerStore

log = logging.getLogger("chainbroker")


def _csv_list(text, conv=str):
    return [conv(x) for x in text.split(",") if x.strip()]


def _read_secrets(path):
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise SystemExit(f"{path}: no keys")
    keys = []
    for ln in lines:
        seed = bytes.fromhex(ln)
        if len(seed) != 32:
            raise SystemExit(f"{path}: secrets must be 32 bytes of hex")
        keys.append(generate_keypair(seed))
    return keys


def cmd_keygen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = [generate_keypair() for _ in range(args.nodes)]
    genesis = Genesis(args.chain_id, ValidatorSet.from_keypairs(keys), int(time.time() * 1000))
    genesis.save(out / "genesis.json")
    for i, kp in enumerate(keys):
        path = out / f"node{i}.key"
        path.write_text(kp.secret.hex() + "\n")
        os.chmod(path, 0o600)
    all_keys = out / "all.keys"
    all_keys.write_text("".join(kp.secret.hex() + "\n" for kp in keys))
    os.chmod(all_keys, 0o600)
    contract, _ = cold_chain_contract()
    (out / "contract.json").write_bytes(contract.to_bytes())
    print(f"wrote genesis, {args.nodes} key files and a sample contract to {out}")
    return 0


def cmd_node(args):
    try:
        genesis = Genesis.load(args.genesis)
        keys = _read_secrets(args.keys)
    except (OSError, ValueError, LedgerError) as exc:
        raise SystemExit(f"cannot start node: {exc}") from exc
    if args.transport == "tcp":
        return asyncio.run(_run_tcp_node(args, genesis, keys[0]))
    return asyncio.run(_run_sim_node(args, genesis, keys))


def _stop_event():
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError, RuntimeError):
            loop.add_signal_handler(sig, stop.set)
    return stop


async def _run_tcp_node(args, genesis, keypair):
    from .tcp import NodeServer

    if keypair.public_hex not in genesis.validators:
        raise SystemExit("key is not a validator in this genesis")
    server = NodeServer(keypair, genesis, args.listen, _csv_list(args.peers or ""), ledger_path=args.ledger)
    stop = _stop_event()
    if args.duration:
        asyncio.get_running_loop().call_later(args.duration, stop.set)
    try:
        await server.start()
    except (OSError, LedgerError) as exc:
        raise SystemExit(f"cannot start node: {exc}") from exc
    await stop.wait()
    await server.stop()
    return 0


async def _run_sim_node(args, genesis, keys):
    """The whole validator set in one process on the simulated network,
    paced against the wall clock, with a client listener on node 0."""
    from .cluster import SimCluster
    from .net import FrameDecoder, FrameError, encode_frame
    from .node import delivery_frame
    from .sim import SimNetConfig
    from .tcp import parse_addr

    cluster = SimCluster(len(keys), keys=keys, genesis=genesis, net_config=SimNetConfig(seed=args.seed))
    node = cluster.nodes[0]
    stop = _stop_event()
    if args.duration:
        asyncio.get_running_loop().call_later(args.duration, stop.set)

    async def client(reader, writer):
        session = node.broker.open_session(lambda d: writer.write(encode_frame(delivery_frame(d))))
        decoder = FrameDecoder()
        try:
            while data := await reader.read(65536):
                for frame in decoder.feed(data):
                    reply = node.handle_client_frame(session, frame)
                    if reply is not None:
                        writer.write(encode_frame(reply))
        except (ConnectionError, FrameError):
            pass
        finally:
            node.broker.close_session(session)
            writer.close()

    host, port = parse_addr(args.listen)
    server = await asyncio.start_server(client, host, port)
    t0 = time.monotonic()
    log.info("simulated %d-validator network serving clients on %s", len(keys), args.listen)
    while not stop.is_set():
        cluster.run(until_ms=(time.monotonic() - t0) * 1000.0)
        await asyncio.sleep(0.005)
    server.close()
    await server.wait_closed()
    return 0


def cmd_experiment(args):
    from .consensus import ConsensusConfig
    from .harness import ExperimentAborted, ExperimentConfig, format_summary, run_experiment, summarize

    out = Path(args.out)
    dirs = []
    for n in _csv_list(args.nodes, int):
        for tps in _csv_list(args.tps, float):
            cell = out / f"n{n}_tps{tps:g}"
            cfg = ExperimentConfig(
                node_count=n, tps=tps, total_messages=args.messages, transport=args.transport, seed=args.seed,
                contract_path=args.contract, out=str(cell), latency_ms=args.latency,
                consensus=ConsensusConfig(commit_timeout_ms=args.commit_timeout),
            )
            try:
                result = run_experiment(cfg)
            except ExperimentAborted as exc:
                print(f"n={n} tps={tps:g}: aborted: {exc}", file=sys.stderr)
                return 2
            print(f"n={n} tps={tps:g}: {result.committed_txs} committed in {result.blocks} blocks -> {cell}")
            dirs.append(cell)
    print(format_summary(summarize(dirs)))
    return 0


def cmd_summarize(args):
    from .harness import SummaryError, format_summary, summarize

    try:
        print(format_summary(summarize(args.paths)))
    except (OSError, SummaryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_verify(args):
    genesis = Genesis.load(args.genesis)
    store = LedgerStore.open(genesis, args.ledger, verify=False)
    report = store.verify_chain()
    if report.ok:
        print(f"ok: {report.checked} blocks, height {store.current_height()}")
        return 0
    print(f"FAILED at height {report.failed_height}: {report.error} {report.detail}")
    return 1


def build_parser():
    p = argparse.ArgumentParser(prog="chainbroker", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="create a genesis file and validator keys")
    k.add_argument("--nodes", type=int, default=4)
    k.add_argument("--chain-id", default="chainbroker")
    k.add_argument("--out", required=True)
    k.set_defaults(fn=cmd_keygen)

    n = sub.add_parser("node", help="run a validator and broker")
    n.add_argument("--genesis", required=True)
    n.add_argument("--keys", required=True, help="hex secret per line (every validator's for --transport sim)")
    n.add_argument("--listen", required=True, help="host:port")
    n.add_argument("--peers", default="", help="comma separated host:port list")
    n.add_argument("--transport", choices=["sim", "tcp"], default="tcp")
    n.add_argument("--ledger", help="block log path (tcp)")
    n.add_argument("--seed", type=int, default=0, help="simulated network seed (sim)")
    n.add_argument("--duration", type=float, help="exit after this many seconds")
    n.set_defaults(fn=cmd_node)

    e = sub.add_parser("experiment", help="run publish workloads and write delay and traffic CSVs")
    e.add_argument("--nodes", default="4", help="node count or comma separated sweep")
    e.add_argument("--tps", default="5", help="publish rate or comma separated sweep")
    e.add_argument("--messages", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--transport", choices=["sim", "tcp"], default="sim")
    e.add_argument("--contract", help="contract document (JSON); defaults to the cold-chain sample")
    e.add_argument("--latency", type=float, default=10.0, help="simulated one-way latency in ms")
    e.add_argument("--commit-timeout", type=float, default=0.0, help="pause after each commit in ms")
    e.set_defaults(fn=cmd_experiment)

    s = sub.add_parser("summarize", help="tabulate delays.csv files or experiment directories")
    s.add_argument("paths", nargs="+")
    s.set_defaults(fn=cmd_summarize)

    v = sub.add_parser("verify", help="check a block log against its genesis")
    v.add_argument("--genesis", required=True)
    v.add_argument("--ledger", required=True)
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
