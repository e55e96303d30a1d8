import json

import pytest

from chainbroker.cli import build_parser, main
from chainbroker.ledger import Genesis


def test_keygen_writes_network(tmp_path, capsys):
    assert main(["keygen", "--nodes", "4", "--chain-id", "demo", "--out", str(tmp_path)]) == 0
    g = Genesis.load(tmp_path / "genesis.json")
    assert g.chain_id == "demo" and len(g.validators) == 4
    assert len((tmp_path / "all.keys").read_text().split()) == 4
    assert json.loads((tmp_path / "contract.json").read_text())["topics"]


def test_experiment_then_summarize(tmp_path, capsys):
    out = tmp_path / "res"
    assert main(["experiment", "--nodes", "4,5", "--tps", "5", "--messages", "10", "--out", str(out)]) == 0
    assert (out / "n4_tps5" / "delays.csv").exists() and (out / "n5_tps5" / "traffic.csv").exists()
    capsys.readouterr()
    assert main(["summarize", str(out / "n4_tps5"), str(out / "n5_tps5")]) == 0
    table = capsys.readouterr().out
    assert "committed" in table and "loopback" in table


def test_experiment_with_contract_file(tmp_path):
    main(["keygen", "--nodes", "2", "--out", str(tmp_path / "k")])
    assert main(["experiment", "--messages", "5", "--contract", str(tmp_path / "k" / "contract.json"),
                 "--out", str(tmp_path / "r")]) == 0


def test_summarize_reports_bad_input(tmp_path, capsys):
    empty = tmp_path / "delays.csv"
    empty.write_text("")
    assert main(["summarize", str(empty)]) == 2
    assert "error" in capsys.readouterr().err


def test_verify_detects_tampering(tmp_path, capsys):
    from chainbroker.fixtures import random_chain

    store, _ = random_chain(n_blocks=5, seed=1, path=tmp_path / "chain.log")
    store.genesis.save(tmp_path / "g.json")
    assert main(["verify", "--genesis", str(tmp_path / "g.json"), "--ledger", str(tmp_path / "chain.log")]) == 0
    raw = bytearray((tmp_path / "chain.log").read_bytes())
    i = raw.rindex(b'"temperature":') + 14
    raw[i] = ord("9") if raw[i] != ord("9") else ord("8")
    (tmp_path / "chain.log").write_bytes(bytes(raw))
    assert main(["verify", "--genesis", str(tmp_path / "g.json"), "--ledger", str(tmp_path / "chain.log")]) == 1


def test_node_flags_exist():
    args = build_parser().parse_args(["node", "--genesis", "g", "--keys", "k", "--listen", "127.0.0.1:1",
                                      "--peers", "a:1,b:2", "--transport", "sim"])
    assert args.transport == "sim" and args.peers == "a:1,b:2"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["node", "--genesis", "g", "--keys", "k", "--listen", "x:1", "--transport", "udp"])


def test_sim_node_serves_clients(tmp_path):
    import asyncio
    import socket
    import subprocess
    import sys
    import time

    from chainbroker.tcp import BrokerClient

    main(["keygen", "--nodes", "4", "--out", str(tmp_path)])
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    proc = subprocess.Popen([sys.executable, "-m", "chainbroker", "node", "--genesis", str(tmp_path / "genesis.json"),
                             "--keys", str(tmp_path / "all.keys"), "--listen", f"127.0.0.1:{port}",
                             "--transport", "sim", "--duration", "20"])

    async def client():
        for _ in range(200):
            try:
                c = await BrokerClient.connect(f"127.0.0.1:{port}")
                break
            except OSError:
                await asyncio.sleep(0.05)
        await c.publish("Contract", json.loads((tmp_path / "contract.json").read_text()))
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline and await c.height() < 1:
            await asyncio.sleep(0.05)
        h = await c.height()
        await c.close()
        return h

    try:
        assert asyncio.run(client()) == 1
    finally:
        proc.terminate()
        assert proc.wait(10) == 0
