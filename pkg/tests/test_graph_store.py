import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tgar.datasets import random_graph
from tgar.graph_store import (DuplicateError, Graph, GraphFormatError, IngestOptions, NodeRangeError, build_indices,
                              gcn_edge_weight, gcn_edge_weights, load_dataset, read_edges, write_edges)
from tgar.oracle import DenseGraph

from conftest import star


def _write(path, text):
    path.write_text(text)
    return path


def _features(path, n, d=2):
    lines = [f"{n} {d}"] + [f"{i} " + " ".join(["1.0"] * d) for i in range(n)]
    return _write(path, "\n".join(lines) + "\n")


@st.composite
def edge_lists(draw, max_n=12, max_m=40):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(0, max_m))
    src = draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m))
    dst = draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m))
    w = draw(st.lists(st.floats(0.1, 5.0), min_size=m, max_size=m))
    return n, src, dst, w


# -- build_indices

def test_build_indices_hand_example():
    csr, csc, _ = build_indices([(0, 1), (0, 2)], 3)
    assert csr.offsets.tolist() == [0, 2, 2, 2]
    assert csr.cols.tolist() == [1, 2]
    assert csc.offsets.tolist() == [0, 0, 1, 2]


def test_self_loop_in_both_lists():
    g = Graph.from_edges(2, [1], [1])
    assert 1 in g.csr.neighbors(1)
    assert 1 in g.csc.neighbors(1)


def test_permuted_input_gives_identical_indices(rng):
    edges = [(0, 1, 1.0), (2, 0, 0.5), (1, 2, 2.0), (2, 1, 1.5), (0, 2, 1.0)]
    a = build_indices(edges, 3)
    b = build_indices([edges[i] for i in rng.permutation(len(edges))], 3)
    for ia, ib in zip(a[:2], b[:2]):
        assert np.array_equal(ia.offsets, ib.offsets)
        assert np.array_equal(ia.cols, ib.cols)
        assert np.array_equal(ia.eids, ib.eids)


@given(edge_lists())
def test_csr_csc_describe_same_edges(case):
    n, src, dst, w = case
    g = Graph.from_edges(n, src, dst, w)
    m = g.num_edges
    assert g.csr.offsets[-1] == m and g.csc.offsets[-1] == m
    assert np.all(np.diff(g.csr.offsets) >= 0) and np.all(np.diff(g.csc.offsets) >= 0)
    assert sorted(g.csr.eids.tolist()) == list(range(m))
    assert sorted(g.csc.eids.tolist()) == list(range(m))
    for v in range(n):
        for e, col in zip(g.csr.edges(v), g.csr.neighbors(v)):
            assert g.src[e] == v and g.dst[e] == col
        for e, col in zip(g.csc.edges(v), g.csc.neighbors(v)):
            assert g.dst[e] == v and g.src[e] == col
    assert g.out_degree().sum() == g.in_degree().sum() == m


@given(edge_lists())
def test_neighbors_match_bruteforce(case):
    n, src, dst, w = case
    g = Graph.from_edges(n, src, dst, w)
    adj = {v: [] for v in range(n)}
    for s, d in zip(src, dst):
        adj[s].append(d)
    for v in range(n):
        assert sorted(g.csr.neighbors(v).tolist()) == sorted(adj[v])


@given(edge_lists())
def test_edge_file_round_trip(tmp_path_factory, case):
    n, src, dst, w = case
    g = Graph.from_edges(n, src, dst, w)
    path = tmp_path_factory.mktemp("rt") / "edges.tsv"
    write_edges(path, g)
    s2, d2, w2, _ = read_edges(path, n)
    h = Graph.from_edges(n, s2, d2, w2)
    for a, b in ((g.csr, h.csr), (g.csc, h.csc)):
        assert np.array_equal(a.offsets, b.offsets) and np.array_equal(a.cols, b.cols)
    assert np.array_equal(g.edge_weights, h.edge_weights)


def test_non_finite_weight_rejected():
    with pytest.raises(ValueError):
        Graph.from_edges(2, [0], [1], [math.inf])


# -- ingestion

def test_empty_edge_file(tmp_path):
    b = load_dataset(_write(tmp_path / "e.tsv", ""), _features(tmp_path / "f.tsv", 3))
    assert b.graph.num_edges == 0
    assert b.graph.csr.offsets.tolist() == [0, 0, 0, 0]


def test_triangle_symmetrized(tmp_path):
    e = _write(tmp_path / "e.tsv", "# triangle\n0\t1\n1\t2\n2\t0\n")
    b = load_dataset(e, _features(tmp_path / "f.tsv", 3), options=IngestOptions(symmetrize=True))
    assert b.graph.num_edges == 6
    assert b.graph.csr.degree().tolist() == [2, 2, 2]


def test_weights_and_edge_features(tmp_path):
    e = _write(tmp_path / "e.tsv", "0 1 2.5 0.1 0.2\n1 0 1.0 0.3 0.4\n")
    s, d, w, ef = read_edges(e, 2)
    assert w.tolist() == [2.5, 1.0]
    assert ef.shape == (2, 2)


@pytest.mark.parametrize("text,exc,line", [
    ("0 1\n0 x\n", GraphFormatError, 2),
    ("0 1\n0 7\n", NodeRangeError, 2),
    ("0 1 1.0 0.5\n1 0 1.0\n", GraphFormatError, 2),
])
def test_bad_edge_files_name_the_line(tmp_path, text, exc, line):
    e = _write(tmp_path / "e.tsv", text)
    with pytest.raises(exc) as info:
        load_dataset(e, _features(tmp_path / "f.tsv", 3))
    assert f":{line}" in str(info.value)


def test_duplicate_feature_row(tmp_path):
    e = _write(tmp_path / "e.tsv", "0 1\n")
    f = _write(tmp_path / "f.tsv", "2 1\n0 1.0\n0 2.0\n")
    with pytest.raises(DuplicateError) as info:
        load_dataset(e, f)
    assert ":3" in str(info.value)


def test_parallel_edges_kept():
    g = Graph.from_edges(2, [0, 0], [1, 1], [1.0, 2.0])
    assert g.num_edges == 2 and g.csr.degree().tolist() == [2, 0]


def test_bad_feature_and_label_files(tmp_path):
    e = _write(tmp_path / "e.tsv", "0 1\n")
    f = _write(tmp_path / "f.tsv", "2 2\n0 1 1\n1 1\n")
    with pytest.raises(GraphFormatError):
        load_dataset(e, f)
    f = _features(tmp_path / "f2.tsv", 2)
    lab = _write(tmp_path / "l.tsv", "0 1 train\n0 0 val\n")
    with pytest.raises(DuplicateError):
        load_dataset(e, f, lab)
    lab = _write(tmp_path / "l2.tsv", "0 1 holdout\n")
    with pytest.raises(GraphFormatError):
        load_dataset(e, f, lab)


def test_labels_and_splits(tmp_path):
    e = _write(tmp_path / "e.tsv", "0 1\n")
    lab = _write(tmp_path / "l.tsv", "0 1 train\n1 0 test\n2 2 val\n")
    b = load_dataset(e, _features(tmp_path / "f.tsv", 3), lab)
    assert b.train_mask.tolist() == [0] and b.test_mask.tolist() == [1] and b.val_mask.tolist() == [2]
    assert b.class_count == 3


# -- GCN coefficients

def test_two_node_offdiagonal():
    g = Graph.from_edges(2, [0, 1], [1, 0]).with_self_loops()
    assert gcn_edge_weight(g, 0, 1) == pytest.approx(-0.5, abs=1e-15)


def test_isolated_self_loop_only():
    g = Graph.from_edges(1, [0], [0])
    assert gcn_edge_weight(g, 0, 0) == 0.0


def test_star_center_leaf():
    g = star(3)
    assert gcn_edge_weight(g, 0, 1) == pytest.approx(-1 / math.sqrt(3), abs=1e-15)
    assert gcn_edge_weight(g, 1, 0) == pytest.approx(-1 / math.sqrt(3), abs=1e-15)


def test_missing_edge_raises():
    with pytest.raises(KeyError):
        gcn_edge_weight(star(3), 1, 2)


def test_zero_degree_has_no_nan():
    g = Graph.from_edges(3, [0], [1])
    assert np.all(np.isfinite(gcn_edge_weights(g)))


@given(st.integers(0, 10_000), st.sampled_from(["laplacian", "renormalized"]))
def test_coefficients_match_dense_matrix(seed, mode):
    g = random_graph(10, 25, seed=seed, symmetric=True, weighted=True, self_loops=True)
    dg = DenseGraph.from_graph(g, mode)
    c = gcn_edge_weights(g, mode)
    assert np.allclose(c, dg.L[g.dst, g.src], atol=1e-14)
