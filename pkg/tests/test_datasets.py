import pickle
from collections import defaultdict

import numpy as np
import pytest

from tgar import datasets
from tgar.graph_store import load_dataset

sp = pytest.importorskip("scipy.sparse")


def _one_hot(labels, c):
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _write_planetoid(root, name="toy"):
    """Six labelled nodes (four training), three test nodes listed out of order."""
    rng = np.random.default_rng(0)
    feats = rng.random((9, 4))
    labels = np.array([0, 1, 0, 1, 0, 1, 1, 0, 1])
    test_index = [8, 6, 7]
    # tx/ty rows follow the order of the test.index file
    parts = {
        "x": sp.csr_matrix(feats[:4]), "y": _one_hot(labels[:4], 2),
        "allx": sp.csr_matrix(feats[:6]), "ally": _one_hot(labels[:6], 2),
        "tx": sp.csr_matrix(feats[test_index]),
        "ty": _one_hot(labels[test_index], 2),
    }
    graph = defaultdict(list, {0: [1, 2], 1: [0], 2: [0, 2], 3: [8], 8: [3, 7], 6: [5]})
    parts["graph"] = graph
    root.mkdir(parents=True, exist_ok=True)
    for k, v in parts.items():
        with open(root / f"ind.{name}.{k}", "wb") as fh:
            pickle.dump(v, fh)
    (root / f"ind.{name}.test.index").write_text("\n".join(map(str, test_index)) + "\n")
    return feats, labels


def test_planetoid_conversion(tmp_path):
    feats, labels = _write_planetoid(tmp_path / "raw")
    out = datasets.convert_planetoid(tmp_path / "raw", "toy", tmp_path / "conv")
    b = load_dataset(out / "edges.tsv", out / "features.tsv", out / "labels.tsv")
    g = b.graph
    assert g.num_nodes == 9
    # test rows land on their listed node ids
    assert np.allclose(g.node_features, feats)
    assert g.labels.tolist() == labels.tolist()
    assert b.train_mask.tolist() == [0, 1, 2, 3]
    assert b.val_mask.tolist() == [4, 5]
    assert b.test_mask.tolist() == [6, 7, 8]
    # self loop 2-2 dropped, each undirected pair once
    pairs = sorted(zip(g.src.tolist(), g.dst.tolist()))
    assert pairs == [(0, 1), (0, 2), (3, 8), (5, 6), (7, 8)]


def test_find_dataset_via_env(tmp_path, monkeypatch):
    _write_planetoid(tmp_path / "toy")
    monkeypatch.setenv(datasets.DATA_ENV, str(tmp_path))
    b = datasets.load_named("toy")
    assert b.graph.num_nodes == 9
    assert b.graph.num_edges == 10  # symmetrized
    assert (tmp_path / "toy" / "converted" / "edges.tsv").exists()


def test_missing_dataset_message(tmp_path, monkeypatch):
    monkeypatch.setenv(datasets.DATA_ENV, str(tmp_path))
    monkeypatch.setenv("HOME", str(tmp_path))
    with pytest.raises(FileNotFoundError, match=datasets.DATA_ENV):
        datasets.load_named("cora")


def test_planted_partition_split_sizes():
    b = datasets.planted_partition(n=400, classes=4, split=(10, 50, 100))
    assert len(b.train_mask) == 40 and len(b.val_mask) == 50 and len(b.test_mask) == 100
    assert not set(b.train_mask) & set(b.test_mask)
    assert np.bincount(b.graph.labels[b.train_mask]).tolist() == [10] * 4


def test_large_random_edge_count():
    g = datasets.large_random(n=2000, m=10000)
    assert g.num_edges == 10000
    assert not np.any(g.src == g.dst)
