"""Immutable attributed graph with CSR (outgoing) and CSC (incoming) indices.

Edges are stored directed; a stored edge ``(src, dst)`` carries messages from
``src`` to ``dst`` in the forward pass.  Edge ids are positions in the
canonical order sorted by ``(src, dst, weight, input order)``, so any
permutation of the same input edge multiset yields identical indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SPLITS = ("train", "val", "test")


class GraphFormatError(ValueError):
    """Malformed input file; message carries ``path:line``."""


class NodeRangeError(IndexError):
    pass


class DuplicateError(ValueError):
    pass


@dataclass(frozen=True)
class AdjIndex:
    """Compressed adjacency: ``cols[offsets[v]:offsets[v+1]]`` are v's neighbors."""

    offsets: np.ndarray
    cols: np.ndarray
    eids: np.ndarray

    def neighbors(self, v: int) -> np.ndarray:
        return self.cols[self.offsets[v]:self.offsets[v + 1]]

    def edges(self, v: int) -> np.ndarray:
        return self.eids[self.offsets[v]:self.offsets[v + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.offsets)


def _freeze(*arrays):
    for a in arrays:
        if a is not None:
            a.setflags(write=False)


def build_indices(edges, num_nodes: int):
    """Build ``(csr, csc)`` from ``(src, dst[, weight])`` tuples.

    Returns the indices plus the canonical edge permutation used to assign
    edge ids (``perm[eid]`` = input position).
    """
    arr = list(edges)
    src = np.array([e[0] for e in arr], dtype=np.int64)
    dst = np.array([e[1] for e in arr], dtype=np.int64)
    w = np.array([e[2] if len(e) > 2 else 1.0 for e in arr], dtype=np.float64)
    perm = canonical_order(src, dst, w, num_nodes)
    csr, csc = _indices(src[perm], dst[perm], num_nodes)
    return csr, csc, perm


def canonical_order(src, dst, weights, num_nodes: int) -> np.ndarray:
    if len(src) and (src.min() < 0 or dst.min() < 0 or src.max() >= num_nodes or dst.max() >= num_nodes):
        bad = int(max(src.max(), dst.max())) if src.max() >= num_nodes or dst.max() >= num_nodes else int(min(src.min(), dst.min()))
        raise NodeRangeError(f"node id {bad} outside [0, {num_nodes})")
    return np.lexsort((np.arange(len(src)), weights, dst, src))


def _indices(src: np.ndarray, dst: np.ndarray, n: int):
    m = len(src)
    eids = np.arange(m, dtype=np.int64)
    out_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=out_off[1:])
    csr = AdjIndex(out_off, dst.copy(), eids)
    order = np.lexsort((eids, src, dst))
    in_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=in_off[1:])
    csc = AdjIndex(in_off, src[order], eids[order])
    for idx in (csr, csc):
        _freeze(idx.offsets, idx.cols, idx.eids)
    return csr, csc


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    edge_weights: np.ndarray
    node_features: np.ndarray
    csr: AdjIndex
    csc: AdjIndex
    edge_features: np.ndarray | None = None
    labels: np.ndarray | None = None

    @classmethod
    def from_edges(cls, num_nodes, src, dst, weights=None, node_features=None,
                   edge_features=None, labels=None) -> "Graph":
        src = np.asarray(src, dtype=np.int64).reshape(-1)
        dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise ValueError("src and dst lengths differ")
        w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != len(src):
            raise ValueError("one weight per edge required")
        if not np.all(np.isfinite(w)):
            raise ValueError("edge weights must be finite")
        perm = canonical_order(src, dst, w, num_nodes)
        src, dst, w = src[perm], dst[perm], w[perm]
        if edge_features is not None:
            edge_features = np.asarray(edge_features, dtype=np.float64)[perm]
        csr, csc = _indices(src, dst, num_nodes)
        if node_features is None:
            node_features = np.zeros((num_nodes, 0))
        x = np.asarray(node_features, dtype=np.float64)
        if x.shape[0] != num_nodes:
            raise ValueError(f"node_features has {x.shape[0]} rows for {num_nodes} nodes")
        if not np.all(np.isfinite(x)):
            raise ValueError("node features must be finite")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
        g = cls(num_nodes, src, dst, w, x, csr, csc, edge_features, labels)
        _freeze(src, dst, w, x, edge_features, labels)
        return g

    @property
    def num_edges(self) -> int:
        return int(len(self.src))

    @property
    def feature_dim(self) -> int:
        return int(self.node_features.shape[1])

    @property
    def edge_feature_dim(self) -> int:
        return 0 if self.edge_features is None else int(self.edge_features.shape[1])

    def out_degree(self) -> np.ndarray:
        return self.csr.degree()

    def in_degree(self) -> np.ndarray:
        return self.csc.degree()

    def edge_id(self, src: int, dst: int) -> int:
        """Smallest edge id of ``src -> dst``; raises KeyError if absent."""
        lo, hi = self.csr.offsets[src], self.csr.offsets[src + 1]
        k = lo + np.searchsorted(self.csr.cols[lo:hi], dst)
        if k >= hi or self.csr.cols[k] != dst:
            raise KeyError(f"no edge {src}->{dst}")
        return int(self.csr.eids[k])

    def has_self_loop(self) -> np.ndarray:
        flags = np.zeros(self.num_nodes, dtype=bool)
        flags[self.src[self.src == self.dst]] = True
        return flags

    def with_self_loops(self, weight: float = 1.0) -> "Graph":
        """Copy with a self-loop added to every node that lacks one."""
        missing = np.flatnonzero(~self.has_self_loop())
        if len(missing) == 0:
            return self
        ef = None
        if self.edge_features is not None:
            ef = np.vstack([self.edge_features, np.zeros((len(missing), self.edge_feature_dim))])
        return Graph.from_edges(
            self.num_nodes,
            np.concatenate([self.src, missing]),
            np.concatenate([self.dst, missing]),
            np.concatenate([self.edge_weights, np.full(len(missing), weight)]),
            self.node_features, ef, self.labels,
        )

    def validate(self) -> None:
        n, m = self.num_nodes, self.num_edges
        for name, idx, key in (("csr", self.csr, self.src), ("csc", self.csc, self.dst)):
            off = idx.offsets
            if off[0] != 0 or off[-1] != m or np.any(np.diff(off) < 0):
                raise AssertionError(f"{name} offsets malformed")
            if not np.array_equal(np.sort(idx.eids), np.arange(m)):
                raise AssertionError(f"{name} edge ids not a permutation")
            owner = np.repeat(np.arange(n), np.diff(off))
            if not np.array_equal(key[idx.eids], owner):
                raise AssertionError(f"{name} rows disagree with edge endpoints")
        if not np.array_equal(self.dst[self.csr.eids], self.csr.cols):
            raise AssertionError("csr columns disagree with edge destinations")
        if not np.array_equal(self.src[self.csc.eids], self.csc.cols):
            raise AssertionError("csc columns disagree with edge sources")
        if self.node_features.shape[0] != n or len(self.edge_weights) != m:
            raise AssertionError("feature/weight sizes")
        if not np.all(np.isfinite(self.edge_weights)):
            raise AssertionError("non-finite edge weight")


@dataclass(frozen=True)
class IngestOptions:
    symmetrize: bool = False
    self_loops: bool = False
    num_nodes: int | None = None


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    graph: Graph
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    class_count: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.graph.num_nodes
        sets = [np.asarray(s, dtype=np.int64) for s in (self.train_mask, self.val_mask, self.test_mask)]
        for s in sets:
            if len(s) and (s.min() < 0 or s.max() >= n):
                raise NodeRangeError("masked node id outside graph")
        a, b, c = (set(s.tolist()) for s in sets)
        if a & b or a & c or b & c:
            raise ValueError("train/val/test masks overlap")

    @property
    def labels(self) -> np.ndarray:
        return self.graph.labels


# --------------------------------------------------------------------------
# text formats


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


def read_edges(path, num_nodes: int | None = None):
    """Parse an edge file into ``(src, dst, weight, edge_features | None)``."""
    src, dst, w, feats = [], [], [], []
    width = None
    for lineno, tok in _lines(path):
        if len(tok) < 2:
            raise GraphFormatError(f"{path}:{lineno}: expected 'src dst [weight] [features...]'")
        try:
            s, d = int(tok[0]), int(tok[1])
            rest = [float(t) for t in tok[2:]]
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: non-numeric field") from None
        if s < 0 or d < 0 or (num_nodes is not None and (s >= num_nodes or d >= num_nodes)):
            raise NodeRangeError(f"{path}:{lineno}: node id {max(s, d) if min(s, d) >= 0 else min(s, d)} out of range")
        ef = rest[1:]
        if width is None:
            width = len(ef)
        elif len(ef) != width:
            raise GraphFormatError(f"{path}:{lineno}: edge feature width {len(ef)} != {width}")
        src.append(s); dst.append(d)
        w.append(rest[0] if rest else 1.0)
        feats.append(ef)
    ef = np.array(feats, dtype=np.float64) if width else None
    return (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
            np.array(w, dtype=np.float64), ef)


def read_features(path):
    rows = _lines(path)
    try:
        lineno, head = next(rows)
    except StopIteration:
        raise GraphFormatError(f"{path}: empty feature file") from None
    if len(head) != 2:
        raise GraphFormatError(f"{path}:{lineno}: header must be 'N d_in'")
    n, d = int(head[0]), int(head[1])
    x = np.zeros((n, d))
    seen = np.zeros(n, dtype=bool)
    for lineno, tok in rows:
        if len(tok) != d + 1:
            raise GraphFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(tok)}")
        try:
            v = int(tok[0])
            vals = [float(t) for t in tok[1:]]
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not 0 <= v < n:
            raise NodeRangeError(f"{path}:{lineno}: node id {v} out of range [0, {n})")
        if seen[v]:
            raise DuplicateError(f"{path}:{lineno}: duplicate feature row for node {v}")
        seen[v] = True
        x[v] = vals
    return x


def read_labels(path, num_nodes: int):
    labels = np.full(num_nodes, -1, dtype=np.int64)
    split = {s: [] for s in SPLITS}
    for lineno, tok in _lines(path):
        if len(tok) != 3 or tok[2] not in split:
            raise GraphFormatError(f"{path}:{lineno}: expected 'node_id class_id train|val|test'")
        try:
            v, c = int(tok[0]), int(tok[1])
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not 0 <= v < num_nodes:
            raise NodeRangeError(f"{path}:{lineno}: node id {v} out of range [0, {num_nodes})")
        if labels[v] >= 0:
            raise DuplicateError(f"{path}:{lineno}: duplicate label for node {v}")
        labels[v] = c
        split[tok[2]].append(v)
    return labels, {k: np.array(sorted(v), dtype=np.int64) for k, v in split.items()}


def load_dataset(edge_path, feature_path, label_path=None, options: IngestOptions = IngestOptions(),
                 name: str | None = None) -> DatasetBundle:
    x = read_features(feature_path)
    n = x.shape[0]
    if options.num_nodes is not None and options.num_nodes != n:
        raise ValueError(f"declared N={options.num_nodes} but feature file has {n}")
    src, dst, w, ef = read_edges(edge_path, n)
    raw_edges = len(src)
    if options.symmetrize:
        keep = src != dst
        src, dst = np.concatenate([src, dst[keep]]), np.concatenate([dst, src[keep]])
        w = np.concatenate([w, w[keep]])
        if ef is not None:
            ef = np.vstack([ef, ef[keep]])
    if label_path is not None:
        labels, split = read_labels(label_path, n)
    else:
        labels, split = None, {s: np.zeros(0, dtype=np.int64) for s in SPLITS}
    g = Graph.from_edges(n, src, dst, w, x, ef, labels)
    if options.self_loops:
        g = g.with_self_loops()
    classes = int(labels.max()) + 1 if labels is not None and (labels >= 0).any() else 0
    return DatasetBundle(g, split["train"], split["val"], split["test"], classes,
                         name or Path(edge_path).stem, {"raw_edges": raw_edges})


def write_edges(path, graph: Graph, weights: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in range(graph.num_edges):
            parts = [str(int(graph.src[e])), str(int(graph.dst[e]))]
            if weights or graph.edge_features is not None:
                parts.append(repr(float(graph.edge_weights[e])))
            if graph.edge_features is not None:
                parts.extend(repr(float(v)) for v in graph.edge_features[e])
            fh.write("\t".join(parts) + "\n")


def write_features(path, x: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{x.shape[0]}\t{x.shape[1]}\n")
        for i, row in enumerate(x):
            fh.write("\t".join([str(i)] + [repr(float(v)) for v in row]) + "\n")


def write_labels(path, labels: np.ndarray, splits: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for split in SPLITS:
            for v in splits.get(split, ()):
                fh.write(f"{int(v)}\t{int(labels[v])}\t{split}\n")


def save_dataset(directory, bundle: DatasetBundle) -> tuple[Path, Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = d / "edges.tsv", d / "features.tsv", d / "labels.tsv"
    write_edges(paths[0], bundle.graph)
    write_features(paths[1], bundle.graph.node_features)
    write_labels(paths[2], bundle.graph.labels,
                 {"train": bundle.train_mask, "val": bundle.val_mask, "test": bundle.test_mask})
    return paths


# --------------------------------------------------------------------------
# GCN normalisation


NORMALIZATIONS = ("laplacian", "renormalized")


def weighted_in_degree(graph: Graph) -> np.ndarray:
    """d_i = sum of weights of edges arriving at i (row sums of A, A[dst, src] = a)."""
    return np.bincount(graph.dst, weights=graph.edge_weights, minlength=graph.num_nodes)


def _inv_sqrt(d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    pos = d > 0
    out[pos] = 1.0 / np.sqrt(d[pos])
    return out


def gcn_edge_weights(graph: Graph, mode: str = "laplacian") -> np.ndarray:
    """Per-edge propagation coefficients for the GCN message ``w_e * n_src``.

    ``laplacian``: entries of L = I - D^-1/2 A D^-1/2 on the edge support:
    ``-a/sqrt(d_src d_dst)`` off the diagonal, ``1 - a/d`` on self-loops
    (so the diagonal of L is carried by a self-loop edge, which may have weight 0).
    ``renormalized``: entries of D^-1/2 A D^-1/2 (call on a graph that already
    carries self-loops to get the usual renormalised adjacency).
    Degree-zero endpoints give weight 0.
    """
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}")
    inv = _inv_sqrt(weighted_in_degree(graph))
    norm = graph.edge_weights * inv[graph.src] * inv[graph.dst]
    if mode == "renormalized":
        return norm
    return np.where(graph.src == graph.dst, 1.0 - norm, -norm)


def gcn_edge_weight(graph: Graph, i: int, j: int, mode: str = "laplacian") -> float:
    """Coefficient L(j, i) carried by the stored edge ``i -> j``."""
    try:
        e = graph.edge_id(i, j)
    except KeyError:
        raise KeyError(f"edge ({i}, {j}) does not exist") from None
    return float(gcn_edge_weights(graph, mode)[e])


def iter_edges(graph: Graph) -> Iterable[tuple[int, int, float]]:
    for e in range(graph.num_edges):
        yield int(graph.src[e]), int(graph.dst[e]), float(graph.edge_weights[e])
