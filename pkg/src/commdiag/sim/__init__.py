"""Discrete-event simulation of collectives with fault injection."""

from .cluster import (
    Cluster,
    ClusterConfig,
    Communicator,
    Completion,
    FaultKind,
    FaultSpec,
    advance,
    build_cluster,
    create_communicator,
    post_collective,
)
from .plan import Plan, Transfer, binary_tree_layers, decompose_op

__all__ = [
    "Cluster", "ClusterConfig", "Communicator", "Completion", "FaultKind", "FaultSpec",
    "Plan", "Transfer", "advance", "binary_tree_layers", "build_cluster",
    "create_communicator", "decompose_op", "post_collective",
]
