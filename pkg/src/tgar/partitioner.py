"""Master/mirror layout and community detection for cluster batches."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_store import Graph


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """Each node has one master partition; each edge lives with its source's master.

    Local ids on partition p list masters first (ascending global id) and then
    mirrors (ascending global id).  Mirrors are placeholders: the plan keeps
    only their ids and owners, never a copy of their features.
    """

    partition_count: int
    master_of: np.ndarray
    masters_of: tuple
    edges_of: tuple
    mirrors_of: tuple

    @property
    def master_count(self) -> np.ndarray:
        return np.array([len(m) for m in self.masters_of], dtype=np.int64)

    @property
    def mirror_count(self) -> np.ndarray:
        return np.array([len(m) for m in self.mirrors_of], dtype=np.int64)

    def global_ids(self, p: int) -> np.ndarray:
        return np.concatenate([self.masters_of[p], self.mirrors_of[p]])

    def global_id(self, p: int, local: int) -> int:
        return int(self.global_ids(p)[local])

    def local_id(self, p: int, node: int) -> int:
        for base, arr in ((0, self.masters_of[p]), (len(self.masters_of[p]), self.mirrors_of[p])):
            k = np.searchsorted(arr, node)
            if k < len(arr) and arr[k] == node:
                return base + int(k)
        raise KeyError(f"node {node} not present on partition {p}")

    def mirror_hosts(self, node: int) -> list[int]:
        """Partitions holding a mirror of ``node``, ascending."""
        return [p for p in range(self.partition_count)
                if _contains(self.mirrors_of[p], node)]

    def validate(self, graph: Graph) -> None:
        P, n = self.partition_count, graph.num_nodes
        counts = np.bincount(self.master_of, minlength=P)
        if counts.max() - counts.min() > 1:
            raise AssertionError("master counts unbalanced")
        owned = np.concatenate(self.edges_of) if graph.num_edges else np.zeros(0, np.int64)
        if not np.array_equal(np.sort(owned), np.arange(graph.num_edges)):
            raise AssertionError("edges not owned exactly once")
        for p in range(P):
            if not np.all(self.master_of[graph.src[self.edges_of[p]]] == p):
                raise AssertionError(f"partition {p} owns an edge whose source is not its master")
            touched = np.union1d(graph.src[self.edges_of[p]], graph.dst[self.edges_of[p]])
            expect = touched[self.master_of[touched] != p]
            if not np.array_equal(expect, self.mirrors_of[p]):
                raise AssertionError(f"partition {p} mirror list wrong")
            if not np.array_equal(self.masters_of[p], np.flatnonzero(self.master_of == p)):
                raise AssertionError(f"partition {p} master list wrong")
        if len(self.master_of) != n:
            raise AssertionError("master_of length")


def _contains(arr: np.ndarray, v: int) -> bool:
    k = np.searchsorted(arr, v)
    return bool(k < len(arr) and arr[k] == v)


def assign_even(num_nodes: int, P: int, seed: int = 0, contiguous: bool = False) -> np.ndarray:
    if not 1 <= P <= max(num_nodes, 1):
        raise PartitionError(f"partition count {P} outside [1, {num_nodes}]")
    if contiguous:
        out = np.empty(num_nodes, dtype=np.int64)
        for p, chunk in enumerate(np.array_split(np.arange(num_nodes), P)):
            out[chunk] = p
        return out
    perm = np.random.default_rng(seed).permutation(num_nodes)
    out = np.empty(num_nodes, dtype=np.int64)
    out[perm] = np.arange(num_nodes) % P
    return out


def plan_from_assignment(graph: Graph, master_of: np.ndarray) -> PartitionPlan:
    master_of = np.asarray(master_of, dtype=np.int64)
    if len(master_of) != graph.num_nodes:
        raise PartitionError("assignment length differs from node count")
    P = int(master_of.max()) + 1 if len(master_of) else 1
    owner = master_of[graph.src]
    masters, edges, mirrors = [], [], []
    for p in range(P):
        e = np.flatnonzero(owner == p)
        nodes = np.union1d(graph.src[e], graph.dst[e])
        masters.append(np.flatnonzero(master_of == p))
        edges.append(e)
        mirrors.append(nodes[master_of[nodes] != p])
    for a in (master_of, *masters, *edges, *mirrors):
        a.setflags(write=False)
    return PartitionPlan(P, master_of, tuple(masters), tuple(edges), tuple(mirrors))


def partition_even(graph: Graph, P: int, seed: int = 0, contiguous: bool = False) -> PartitionPlan:
    return plan_from_assignment(graph, assign_even(graph.num_nodes, P, seed, contiguous))


def replica_factor(plan: PartitionPlan, placeholder_mode: bool = True) -> float:
    if placeholder_mode:
        return 1.0
    masters = int(plan.master_count.sum())
    return (masters + int(plan.mirror_count.sum())) / masters


def write_plan(path, plan: PartitionPlan) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"P={plan.partition_count}\n")
        for v, p in enumerate(plan.master_of):
            fh.write(f"{v}\t{int(p)}\n")


def read_plan(path, graph: Graph) -> PartitionPlan:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        if not head.startswith("P="):
            raise PartitionError(f"{path}:1: expected header 'P=<count>'")
        P = int(head[2:])
        assign = np.full(graph.num_nodes, -1, dtype=np.int64)
        for lineno, line in enumerate(fh, 2):
            tok = line.split()
            if not tok:
                continue
            v, p = int(tok[0]), int(tok[1])
            if not 0 <= p < P or not 0 <= v < graph.num_nodes:
                raise PartitionError(f"{path}:{lineno}: id out of range")
            assign[v] = p
    if (assign < 0).any():
        raise PartitionError(f"{path}: node {int(np.flatnonzero(assign < 0)[0])} unassigned")
    plan = plan_from_assignment(graph, assign)
    if plan.partition_count != P:
        # trailing empty partitions are not representable; keep the declared count
        extra = P - plan.partition_count
        empty = np.zeros(0, dtype=np.int64)
        empty.setflags(write=False)
        plan = PartitionPlan(P, plan.master_of, plan.masters_of + (empty,) * extra,
                             plan.edges_of + (empty,) * extra, plan.mirrors_of + (empty,) * extra)
    return plan


# --------------------------------------------------------------------------
# clusters


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    cluster_of: np.ndarray
    cluster_count: int

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.cluster_count)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == c)

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        _, dense = np.unique(np.asarray(labels), return_inverse=True)
        return cls(dense.astype(np.int64), int(dense.max()) + 1 if len(dense) else 0)


def _densify_first_seen(labels: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, c in enumerate(labels):
        out[i] = mapping.setdefault(int(c), len(mapping))
    return out


def _symmetric_adjacency(graph: Graph):
    """Undirected weighted adjacency (A + A^T)/2 without self-loops, as dict rows."""
    n = graph.num_nodes
    rows: list[dict[int, float]] = [dict() for _ in range(n)]
    loops = np.zeros(n)
    for s, d, w in zip(graph.src.tolist(), graph.dst.tolist(), graph.edge_weights.tolist()):
        if s == d:
            loops[s] += w
            continue
        rows[s][d] = rows[s].get(d, 0.0) + w / 2
        rows[d][s] = rows[d].get(s, 0.0) + w / 2
    return rows, loops


def modularity(graph: Graph, cluster_of) -> float:
    """Newman modularity of an assignment on the symmetrised graph."""
    rows, loops = _symmetric_adjacency(graph)
    cluster_of = np.asarray(cluster_of)
    k = np.array([sum(r.values()) for r in rows]) + loops
    two_m = k.sum()
    if two_m == 0:
        return 0.0
    inside = loops.sum()
    for i, r in enumerate(rows):
        inside += sum(w for j, w in r.items() if cluster_of[j] == cluster_of[i])
    tot = np.bincount(cluster_of, weights=k)
    return float(inside / two_m - np.sum((tot / two_m) ** 2))


def cluster_louvain(graph: Graph, seed: int = 0, max_sweeps: int = 100) -> ClusterAssignment:
    """Single-level Louvain: local moves until no positive modularity gain."""
    n = graph.num_nodes
    if n == 0:
        raise PartitionError("empty graph")
    rows, loops = _symmetric_adjacency(graph)
    k = np.array([sum(r.values()) for r in rows]) + loops
    two_m = float(k.sum())
    community = np.arange(n)
    if two_m == 0:
        return ClusterAssignment(community, n)
    tot = k.copy()
    order = np.random.default_rng(seed).permutation(n)
    q = modularity(graph, community)
    for _ in range(max_sweeps):
        moved = False
        for i in order.tolist():
            ci = community[i]
            links: dict[int, float] = {}
            for j, w in rows[i].items():
                links[community[j]] = links.get(community[j], 0.0) + w
            tot[ci] -= k[i]
            best, best_gain = ci, links.get(ci, 0.0) - tot[ci] * k[i] / two_m
            for c in sorted(links):
                gain = links[c] - tot[c] * k[i] / two_m
                if gain > best_gain + 1e-12:
                    best, best_gain = c, gain
            tot[best] += k[i]
            if best != ci:
                community[i] = best
                moved = True
        if not moved:
            break
        q_new = modularity(graph, community)
        assert q_new >= q - 1e-12, "modularity decreased during a sweep"
        q = q_new
    dense = _densify_first_seen(community)
    return ClusterAssignment(dense, int(dense.max()) + 1)


def load_clusters(path, num_nodes: int) -> ClusterAssignment:
    assign = np.full(num_nodes, -1, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 2:
                raise PartitionError(f"{path}:{lineno}: expected 'node_id cluster_id'")
            v, c = int(tok[0]), int(tok[1])
            if not 0 <= v < num_nodes:
                raise PartitionError(f"{path}:{lineno}: node id {v} out of range")
            assign[v] = c
    missing = np.flatnonzero(assign < 0)
    if len(missing):
        raise PartitionError(f"{path}: missing cluster for node {int(missing[0])}")
    ids = np.unique(assign)
    if not np.array_equal(ids, np.arange(len(ids))):
        warnings.warn(f"{path}: cluster ids not dense; re-densified to 0..{len(ids) - 1}")
    return ClusterAssignment.from_labels(assign)


def write_clusters(path, clusters: ClusterAssignment) -> None:
    Path(path).write_text("".join(f"{v}\t{int(c)}\n" for v, c in enumerate(clusters.cluster_of)),
                          encoding="utf-8")
