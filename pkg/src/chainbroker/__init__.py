"""Publish/subscribe brokers whose contract-bound topics are ordered and
checked by a permissioned BFT ledger before subscribers see them."""

from .broker import Broker, Delivery, PublishPath, PublishReceipt, SubscriptionTable
from .cluster import SimCluster
from .consensus import ConsensusConfig, ConsensusEngine, Proposal, Vote
from .contract import (
    Condition,
    ContractRegistry,
    SmartContract,
    TopicFilter,
    evaluate,
    filters_intersect,
    make_contract,
    match_topic,
    parse_contract,
)
from .crypto import KeyPair, ValidatorSet, generate_keypair, quorum_threshold, sign, verify
from .encoding import canonical_deserialize, canonical_serialize
from .harness import ExperimentConfig, run_experiment, summarize
from .ledger import Block, BlockHeader, Genesis, LedgerStore, Transaction, Verdict, genesis_block, merkle_root
from .net import Frame, FrameType, decode_frame, encode_frame
from .node import Node
from .sim import SimNetConfig, SimNetwork

__version__ = "0.1.0"

__all__ = [
    "Block",
    "BlockHeader",
    "Broker",
    "Condition",
    "ConsensusConfig",
    "ConsensusEngine",
    "ContractRegistry",
    "Delivery",
    "ExperimentConfig",
    "Frame",
    "FrameType",
    "Genesis",
    "KeyPair",
    "LedgerStore",
    "Node",
    "Proposal",
    "PublishPath",
    "PublishReceipt",
    "SimCluster",
    "SimNetConfig",
    "SimNetwork",
    "SmartContract",
    "SubscriptionTable",
    "TopicFilter",
    "Transaction",
    "ValidatorSet",
    "Verdict",
    "Vote",
    "canonical_deserialize",
    "canonical_serialize",
    "decode_frame",
    "encode_frame",
    "evaluate",
    "filters_intersect",
    "generate_keypair",
    "genesis_block",
    "make_contract",
    "match_topic",
    "merkle_root",
    "parse_contract",
    "quorum_threshold",
    "run_experiment",
    "sign",
    "summarize",
    "verify",
]
