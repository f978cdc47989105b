"""Logical K-hop subgraphs over the global graph storage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_store import Graph


class ViewError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GraphView:
    """Target nodes plus the part of their K-hop in-neighbourhood they need.

    ``max_layer[v]`` is the highest layer whose embedding ``h_v^l`` must be
    computed (``K - bfs_depth``), or -1 if ``v`` is outside the view.  A node
    participates in layers ``0..max_layer[v]``.  ``edge_mask`` marks the
    in-edges the view uses.  Adjacency is never copied: lookups go through the
    graph's CSR/CSC plus :attr:`nodes` as the local-to-global id map.
    """

    graph: Graph
    K: int
    targets: np.ndarray
    max_layer: np.ndarray
    edge_mask: np.ndarray

    @property
    def nodes(self) -> np.ndarray:
        return np.flatnonzero(self.max_layer >= 0)

    @property
    def num_nodes(self) -> int:
        return int(np.count_nonzero(self.max_layer >= 0))

    def local_id(self, global_ids) -> np.ndarray:
        nodes = self.nodes
        g = np.asarray(global_ids)
        loc = np.searchsorted(nodes, g)
        if np.any(loc >= len(nodes)) or np.any(nodes[np.minimum(loc, len(nodes) - 1)] != g):
            raise ViewError("node not in view")
        return loc

    def active(self, layer: int) -> np.ndarray:
        """Nodes whose layer-``layer`` embedding is computed."""
        return np.flatnonzero(self.max_layer >= layer)

    def edges(self, layer: int) -> np.ndarray:
        """Edge ids feeding layer ``layer`` (destinations with max_layer >= layer)."""
        return np.flatnonzero(self.edge_mask & (self.max_layer[self.graph.dst] >= layer))

    def touched_per_target(self) -> float:
        return self.num_nodes / len(self.targets)


def _in_edges(graph: Graph, nodes: np.ndarray) -> np.ndarray:
    off = graph.csc.offsets
    starts, ends = off[nodes], off[nodes + 1]
    counts = ends - starts
    if counts.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.repeat(starts - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
    return graph.csc.eids[idx]


def build_view(graph: Graph, targets, K: int, fanout: int | None = None, seed=0,
               allowed: np.ndarray | None = None) -> GraphView:
    """BFS over in-edges from ``targets`` for ``K`` levels.

    ``fanout`` caps the number of in-edges kept per expanded node (seeded
    uniform choice without replacement).  ``allowed`` (boolean mask over
    nodes) restricts expansion to those nodes, which gives Cluster-GCN style
    batches; leaving it out keeps the full K-hop boundary.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    targets = np.unique(np.asarray(targets, dtype=np.int64))
    if len(targets) == 0:
        raise ViewError("empty target set")
    depth = np.full(graph.num_nodes, -1, dtype=np.int64)
    depth[targets] = 0
    edge_mask = np.zeros(graph.num_edges, dtype=bool)
    rng = np.random.default_rng(seed) if fanout is not None else None
    frontier = targets
    for d in range(K):
        if fanout is None:
            e = _in_edges(graph, frontier)
        else:
            chosen = []
            for v in frontier.tolist():
                ev = graph.csc.edges(v)
                if allowed is not None:
                    ev = ev[allowed[graph.src[ev]]]
                if len(ev) > fanout:
                    ev = np.sort(rng.choice(ev, size=fanout, replace=False))
                chosen.append(ev)
            e = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
        if allowed is not None:
            e = e[allowed[graph.src[e]]]
        edge_mask[e] = True
        src = np.unique(graph.src[e])
        fresh = src[depth[src] < 0]
        depth[fresh] = d + 1
        frontier = fresh
    max_layer = np.where(depth >= 0, K - depth, -1)
    for a in (targets, max_layer, edge_mask):
        a.setflags(write=False)
    return GraphView(graph, K, targets, max_layer, edge_mask)


def full_view(graph: Graph, K: int, targets=None) -> GraphView:
    """Every node active at every layer, every edge used."""
    t = np.arange(graph.num_nodes) if targets is None else np.unique(np.asarray(targets, dtype=np.int64))
    max_layer = np.full(graph.num_nodes, K, dtype=np.int64)
    mask = np.ones(graph.num_edges, dtype=bool)
    for a in (t, max_layer, mask):
        a.setflags(write=False)
    return GraphView(graph, K, t, max_layer, mask)
