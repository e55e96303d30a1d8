import asyncio
import time

import pytest

from chainbroker.fixtures import cold_chain_contract, keyring, make_genesis
from chainbroker.harness import DelayPath, ExperimentConfig, run_experiment
from chainbroker.ledger import Genesis, LedgerStore
from chainbroker.tcp import BrokerClient, NodeServer, parse_addr, start_local_cluster, wait_for


def _genesis(keys, chain="tcp-test"):
    return make_genesis(keys, chain, genesis_time=int(time.time() * 1000) - 1)


def test_parse_addr():
    assert parse_addr("127.0.0.1:7000") == ("127.0.0.1", 7000)
    for bad in ("nohost", "h:notaport", "h:70000"):
        with pytest.raises(ValueError):
            parse_addr(bad)


def test_four_nodes_commit_over_sockets(tmp_path):
    async def scenario():
        keys = keyring(4, seed=21)
        genesis = _genesis(keys)
        servers = await start_local_cluster(keys, genesis, base_dir=tmp_path)
        try:
            assert await wait_for(lambda: all(len(s.transport.peers) == 3 for s in servers), 10)
            contract, _ = cold_chain_contract(1)
            watcher = await BrokerClient.connect(servers[3].listen)
            await watcher.subscribe("supply/+/temperature_verified")
            pub = await BrokerClient.connect(servers[0].listen)
            ack = await pub.publish("Contract", contract.to_document())
            assert ack["path"] == "contract_submitted"
            assert await wait_for(lambda: all(contract.contract_id in s.node.registry for s in servers), 20)
            ack = await pub.publish("supply/t1/temperature", {"temperature": 3, "humidity": 40})
            assert ack["path"] == "submitted"
            assert await wait_for(lambda: len(watcher.deliveries) == 1, 20)
            prov = watcher.deliveries[0][1]["provenance"]
            assert prov["tx_id"] == ack["tx_id"] and prov["verdict"] == "Approved"
            h = await pub.height()
            blocks = [await c.block(h) for c in (pub, watcher)]
            assert blocks[0] == blocks[1]
            for c in (pub, watcher):
                await c.close()
            return genesis, h
        finally:
            for s in servers:
                await s.stop()

    genesis, h = asyncio.run(scenario())
    for i in range(4):
        store = LedgerStore.open(genesis, tmp_path / f"node{i}.log")
        assert store.current_height() >= h and store.verify_chain().ok


def test_restarted_node_catches_up(tmp_path):
    async def scenario():
        keys = keyring(4, seed=22)
        genesis = _genesis(keys)
        servers = await start_local_cluster(keys, genesis, base_dir=tmp_path)
        try:
            assert await wait_for(lambda: all(len(s.transport.peers) == 3 for s in servers), 10)
            pub = await BrokerClient.connect(servers[0].listen)
            contract, _ = cold_chain_contract(2)
            await pub.publish("Contract", contract.to_document())
            assert await wait_for(lambda: all(s.node.height == 1 for s in servers), 20)
            victim = servers[3]
            await victim.stop()
            for i in range(2):
                await pub.publish("supply/x/temperature", {"temperature": i, "humidity": 1})
                h = servers[0].node.height
                assert await wait_for(lambda h=h: servers[0].node.height > h, 20)
            reborn = NodeServer(victim.keypair, genesis, victim.listen, victim.peers, ledger_path=victim.ledger_path)
            servers[3] = reborn
            await reborn.start()
            assert reborn.node.height == 1
            await pub.publish("supply/x/temperature", {"temperature": 9, "humidity": 1})
            target = servers[0].node.height + 1
            assert await wait_for(lambda: all(s.node.height >= target for s in servers), 20)
            assert reborn.node.ledger.block_hashes()[:target] == servers[0].node.ledger.block_hashes()[:target]
            assert contract.contract_id in reborn.node.registry
            await pub.close()
        finally:
            for s in servers:
                await s.stop()

    asyncio.run(scenario())


def test_foreign_chain_is_refused():
    async def scenario():
        keys = keyring(4, seed=23)
        ours = await start_local_cluster(keys, _genesis(keys, "ours"))
        other_keys = keyring(1, seed=24)
        other = Genesis("theirs", _genesis(other_keys).validators, 1)
        stranger = NodeServer(other_keys[0], other, "127.0.0.1:0", [ours[0].listen])
        try:
            await stranger.start()
            assert await wait_for(lambda: ours[0].listen in stranger.refused, 10)
            assert stranger.node_id not in ours[0].transport.peers
        finally:
            await stranger.stop()
            for s in ours:
                await s.stop()

    asyncio.run(scenario())


def test_tcp_experiment_small():
    r = run_experiment(ExperimentConfig(node_count=4, tps=20, total_messages=15, transport="tcp", seed=1))
    assert r.committed_txs == r.bound_published == 15
    assert len(r.delays(DelayPath.COMMITTED)) == 30
