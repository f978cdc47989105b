"""Staged message-passing GNN training over master/mirror partitioned graphs."""

from .graph_store import DatasetBundle, Graph, IngestOptions, build_indices, gcn_edge_weight, load_dataset
from .partitioner import (ClusterAssignment, PartitionPlan, cluster_louvain, load_clusters, partition_even,
                          replica_factor)
from .engine import Engine, LayerProgram, reduce_params
from .models import Model, ModelSpec, gat_edge_program, gcn_program
from .trainer import Trainer, TrainingConfig, select_batch
from .view import GraphView, build_view

__version__ = "0.1.0"

__all__ = [
    "ClusterAssignment", "DatasetBundle", "Engine", "Graph", "GraphView", "IngestOptions", "LayerProgram",
    "Model", "ModelSpec", "PartitionPlan", "Trainer", "TrainingConfig", "build_indices", "build_view",
    "cluster_louvain", "gat_edge_program", "gcn_edge_weight", "gcn_program", "load_clusters", "load_dataset",
    "partition_even", "reduce_params", "replica_factor", "select_batch",
]
