"""Dataset helpers: synthetic generators and a Planetoid-format converter."""

from __future__ import annotations

import os
import pickle
from pathlib import Path

import numpy as np

from .graph_store import DatasetBundle, Graph, IngestOptions, load_dataset, save_dataset

DATA_ENV = "TGAR_DATA"
PLANETOID = ("cora", "citeseer", "pubmed")


def random_graph(n: int, m: int, d_in: int = 4, num_classes: int = 3, seed: int = 0,
                 symmetric: bool = False, weighted: bool = False, edge_dim: int = 0,
                 self_loops: bool = False) -> Graph:
    """Uniform random directed multigraph-free edge set (no duplicate pairs)."""
    rng = np.random.default_rng(seed)
    pairs = set()
    cap = n * (n - 1) // (2 if symmetric else 1)
    m = min(m, cap)
    while len(pairs) < m:
        s, d = (int(v) for v in rng.integers(0, n, size=2))
        if s == d:
            continue
        if symmetric:
            s, d = min(s, d), max(s, d)
        pairs.add((s, d))
    pairs = sorted(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    w = rng.uniform(0.5, 2.0, size=len(src)) if weighted else np.ones(len(src))
    if symmetric:
        src, dst, w = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
    ef = rng.standard_normal((len(src), edge_dim)) if edge_dim else None
    x = rng.standard_normal((n, d_in))
    y = rng.integers(0, num_classes, size=n)
    g = Graph.from_edges(n, src, dst, w, x, ef, y)
    return g.with_self_loops() if self_loops else g


def bundle_from_graph(graph: Graph, train=None, val=None, test=None, name: str = "synthetic",
                      num_classes: int | None = None) -> DatasetBundle:
    n = graph.num_nodes
    train = np.arange(n) if train is None else np.asarray(train, dtype=np.int64)
    val = np.zeros(0, dtype=np.int64) if val is None else np.asarray(val, dtype=np.int64)
    test = np.zeros(0, dtype=np.int64) if test is None else np.asarray(test, dtype=np.int64)
    c = num_classes if num_classes is not None else int(graph.labels.max()) + 1
    return DatasetBundle(graph, train, val, test, c, name)


def two_communities(size: int = 40, p_in: float = 0.5, bridges: int = 2, d_in: int = 8,
                    seed: int = 0) -> tuple[Graph, np.ndarray]:
    """Two dense communities joined by a few bridge edges (symmetric).

    Returns the graph and the ground-truth community of each node.
    """
    rng = np.random.default_rng(seed)
    n = 2 * size
    comm = np.repeat([0, 1], size)
    src, dst = [], []
    for c in range(2):
        base = c * size
        for i in range(size):
            for j in range(i + 1, size):
                if rng.random() < p_in:
                    src.append(base + i); dst.append(base + j)
    for _ in range(bridges):
        src.append(int(rng.integers(0, size))); dst.append(int(rng.integers(size, n)))
    s = np.array(src + dst, dtype=np.int64)
    d = np.array(dst + src, dtype=np.int64)
    x = rng.standard_normal((n, d_in)) + comm[:, None]
    return Graph.from_edges(n, s, d, None, x, None, comm), comm


def planted_partition(n: int = 600, classes: int = 4, p_in: float = 0.02, p_out: float = 0.002,
                      d_in: int = 50, signal: float = 0.6, seed: int = 0,
                      split: tuple = (20, 100, 300)) -> DatasetBundle:
    """Citation-like synthetic node classification task.

    Labels follow the planted blocks; features are noisy bag-of-words style
    vectors whose class signal is weak on its own, so neighbourhood
    aggregation matters.  ``split`` = (train per class, val, test).
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    same = y[:, None] == y[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    s, d = np.nonzero(upper)
    src, dst = np.concatenate([s, d]), np.concatenate([d, s])
    centers = rng.random((classes, d_in)) < 0.1
    x = (rng.random((n, d_in)) < 0.05).astype(np.float64)
    x += signal * centers[y] * (rng.random((n, d_in)) < 0.5)
    x = (x > 0).astype(np.float64)
    g = Graph.from_edges(n, src, dst, None, x, None, y)
    order = rng.permutation(n)
    per, n_val, n_test = split
    train = np.concatenate([order[y[order] == c][:per] for c in range(classes)])
    rest = order[~np.isin(order, train)]
    return DatasetBundle(g, np.sort(train), np.sort(rest[:n_val]), np.sort(rest[n_val:n_val + n_test]),
                         classes, "planted")


def large_random(n: int = 20000, m: int = 100000, d_in: int = 16, classes: int = 4, seed: int = 0) -> Graph:
    """Sparse random graph of ``m`` directed edges (duplicates removed)."""
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n, size=int(m * 1.05))
    dst = rng.integers(0, n, size=int(m * 1.05))
    keep = src != dst
    pairs = np.unique(np.stack([src[keep], dst[keep]], axis=1), axis=0)[:m]
    x = rng.standard_normal((n, d_in))
    y = rng.integers(0, classes, size=n)
    return Graph.from_edges(n, pairs[:, 0], pairs[:, 1], None, x, None, y)


# --------------------------------------------------------------------------
# Planetoid


def _load_pickle(path: Path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert_planetoid(raw_dir, name: str, out_dir) -> Path:
    """Convert the public ``ind.<name>.*`` files to this package's text formats.

    Uses the standard split: the ``y`` rows (20 per class) for training, the
    next 500 ``ally`` rows for validation, the listed test nodes for testing.
    Needs scipy to unpickle the sparse matrices.
    """
    import scipy.sparse as sp  # the pickles hold scipy sparse matrices

    raw = Path(raw_dir)
    parts = {k: _load_pickle(raw / f"ind.{name}.{k}") for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    test_idx = [int(v) for v in (raw / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_idx)
    tx, ty = parts["tx"], parts["ty"]
    if name == "citeseer":
        # some test nodes are isolated and missing from tx; pad with zero rows
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((len(full), tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        ty_ext = np.zeros((len(full), ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        tx, ty = tx_ext, ty_ext
    feats = sp.vstack((parts["allx"], tx)).tolil()
    feats[test_idx, :] = feats[test_sorted, :]
    labels = np.vstack((parts["ally"], ty))
    labels[test_idx, :] = labels[test_sorted, :]
    n = feats.shape[0]
    y = labels.argmax(1)
    graph = parts["graph"]
    src, dst = [], []
    for s, nbrs in graph.items():
        for d in nbrs:
            if s != d and d < n:
                src.append(s); dst.append(d)
    pairs = {(min(a, b), max(a, b)) for a, b in zip(src, dst)}
    pairs = sorted(pairs)
    g = Graph.from_edges(n, [p[0] for p in pairs], [p[1] for p in pairs], None,
                         np.asarray(feats.todense()), None, y)
    n_train = parts["y"].shape[0]
    labelled = labels.sum(1) > 0
    train = np.arange(n_train)
    val = np.arange(n_train, min(n_train + 500, parts["allx"].shape[0]))
    test = test_sorted[labelled[test_sorted]]
    bundle = DatasetBundle(g, train, val, test, int(labels.shape[1]), name)
    out = Path(out_dir)
    save_dataset(out, bundle)
    return out


def data_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def find_dataset(name: str) -> Path | None:
    """Directory holding converted ``edges.tsv/features.tsv/labels.tsv`` for ``name``."""
    root = data_root()
    candidates = [root / name] if root else []
    candidates.append(Path.home() / ".tgar" / "data" / name)
    for c in candidates:
        if (c / "edges.tsv").exists():
            return c
        if (c / f"ind.{name}.x").exists() or (c / "raw" / f"ind.{name}.x").exists():
            raw = c if (c / f"ind.{name}.x").exists() else c / "raw"
            return convert_planetoid(raw, name, c / "converted")
        if (c / "converted" / "edges.tsv").exists():
            return c / "converted"
    return None


def load_named(name: str, symmetrize: bool = True) -> DatasetBundle:
    d = find_dataset(name)
    if d is None:
        raise FileNotFoundError(
            f"dataset {name!r} not found; set {DATA_ENV} to a directory containing {name}/ "
            f"with edges.tsv/features.tsv/labels.tsv or the ind.{name}.* Planetoid files")
    return load_dataset(d / "edges.tsv", d / "features.tsv", d / "labels.tsv",
                        IngestOptions(symmetrize=symmetrize), name=name)
