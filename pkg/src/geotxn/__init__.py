"""Geo-replicated transaction protocol simulation with synchronized-clock
future timestamps, plus strict-serializability and linearizability checkers."""

from .checker import (HistoryRecord, Verdict, check_strict_serializability,
                      linearizability_per_shard, replay_serial)
from .experiment import Cluster, ExperimentConfig, RunResult, run, sweep
from .sim import ClockModel, NetModel, NodeId, OwdEstimator, Simulator
from .types import (Timestamp, Transaction, TxnId, ViewRecord, compare,
                    conflicts, make_txn)

__all__ = [
    "Cluster", "ClockModel", "ExperimentConfig", "HistoryRecord", "NetModel",
    "NodeId", "OwdEstimator", "RunResult", "Simulator", "Timestamp",
    "Transaction", "TxnId", "Verdict", "ViewRecord",
    "check_strict_serializability", "compare", "conflicts",
    "linearizability_per_shard", "make_txn", "replay_serial", "run", "sweep",
]
