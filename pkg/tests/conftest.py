import pytest

from chainbroker.contract import make_contract
from chainbroker.fixtures import cold_chain_contract, keyring, make_genesis
from chainbroker.ledger import LedgerStore


@pytest.fixture
def keys4():
    return keyring(4, seed=11)


@pytest.fixture
def genesis4(keys4):
    return make_genesis(keys4, chain_id="unit")


@pytest.fixture
def store4(genesis4):
    return LedgerStore.open(genesis4)


@pytest.fixture
def cold_chain():
    return cold_chain_contract(seed=3)


@pytest.fixture
def publisher():
    return keyring(1, seed=99, label="publisher")[0]


def simple_contract(holders, topics=("a/+/b",), conditions=(("x", "LT", 5),)):
    return make_contract([(f"s{i}", kp) for i, kp in enumerate(holders)], list(topics), list(conditions),
                         signers=holders)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
