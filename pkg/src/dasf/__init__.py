"""Distributed adaptive signal fusion over simulated sensor networks."""

from .engine import EngineConfig, RunReport, run
from .fixes import FixConfig
from .graph import NetworkGraph, PrunedTree, prune_to_tree
from .problems import make_problem
from .signals import SignalModel, StatisticsSet, exact_statistics

__all__ = [
    "EngineConfig",
    "FixConfig",
    "NetworkGraph",
    "PrunedTree",
    "RunReport",
    "SignalModel",
    "StatisticsSet",
    "exact_statistics",
    "make_problem",
    "prune_to_tree",
    "run",
]
