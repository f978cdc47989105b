import numpy as np
import pytest
from hypothesis import given, strategies as st

from tgar import checks, oracle
from tgar.autodiff import EXACT, FAST
from tgar.datasets import random_graph
from tgar.engine import (TO_MIRROR, Contribution, Engine, Transport, TransportError, reduce_params)
from tgar.graph_store import Graph
from tgar.models import Model, ModelSpec, identity_program
from tgar.partitioner import partition_even
from tgar.view import build_view, full_view

from conftest import path4, star


def _identity_run(g, P, exact=False, contiguous=False, K=1):
    eng = Engine(g, partition_even(g, P, contiguous=contiguous), exact=exact)
    task = eng.new_task(full_view(g, K), [identity_program()] * K, {})
    eng.forward(task)
    return eng, task


def test_gcn_two_nodes_matches_dense():
    g = Graph.from_edges(2, [0, 1], [1, 0], None, np.array([[1.0, 2.0], [3.0, -1.0]]))
    spec = ModelSpec((2, 2), activations=("identity",), decoder="none")
    params = {"W1": np.array([[0.5, -1.0], [2.0, 1.0]])}
    out = checks.engine_forward(g, spec, params)
    dg = oracle.DenseGraph.from_graph(g, "laplacian", self_loops=True)
    assert np.allclose(out, dg.L @ g.node_features @ params["W1"], atol=1e-15)


def test_identity_program_star_sum():
    g = star(3)
    eng, task = _identity_run(g, 1)
    h = eng.layer_output(task, 1)
    assert h[0, 0] == 2.0 + 3.0 + 4.0
    assert np.all(h[1:, 0] == 1.0)


def test_path_two_partitions_bitwise():
    g = path4()
    a = _identity_run(g, 1, exact=True, K=2)
    b = _identity_run(g, 2, exact=True, contiguous=True, K=2)
    assert np.array_equal(a[0].layer_output(a[1], 2), b[0].layer_output(b[1], 2))


def test_path_sync_messages():
    g = path4()
    eng = Engine(g, partition_even(g, 2, contiguous=True))
    task = eng.new_task(full_view(g, 1), [identity_program()], {})
    eng.forward_layer(task, 1)
    assert task.transport.messages[TO_MIRROR] == 2
    assert task.layouts[1][0].mirrors.tolist() == [2]
    assert task.layouts[1][1].mirrors.tolist() == [1]


def test_single_partition_sends_nothing():
    eng, task = _identity_run(random_graph(12, 40, seed=0, d_in=2), 1, K=2)
    assert sum(task.transport.messages.values()) == 0


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_sync_count_equals_mirror_count(seed, P):
    g = random_graph(20, 70, seed=seed, d_in=2)
    plan = partition_even(g, P, seed=seed)
    eng = Engine(g, plan)
    task = eng.new_task(full_view(g, 1), [identity_program()], {})
    eng.forward_layer(task, 1)
    assert task.transport.messages[TO_MIRROR] == int(plan.mirror_count.sum())
    assert task.counters["csr_mirror_dst"] == 0


def test_fd_two_layer_gcn():
    g = random_graph(6, 12, d_in=3, num_classes=3, seed=7, symmetric=True)
    spec = checks.gcn_spec([3, 4, 3], weight_decay=1e-3)
    params = checks.random_params(Model.build(spec), 7)
    res = checks.fd_engine_check(g, spec, params, np.arange(6))
    assert res.passed, res


def test_zero_upstream_gives_zero_grads():
    g = random_graph(8, 20, d_in=3, seed=1, symmetric=True)
    spec = ModelSpec((3, 4, 2), decoder="none")
    model = Model.build(spec)
    params = model.init_params(0)
    gp, coef = model.prepare(g)
    eng = Engine(gp, partition_even(gp, 3), coef)
    task = eng.new_task(full_view(gp, 2), model.programs, params, input_grad=True)
    eng.forward(task)
    grads = eng.backward(task)
    assert all(not np.any(v) for v in grads.values())
    assert not np.any(eng.input_grad(task))


def test_gradients_bitwise_across_partitions():
    g = random_graph(18, 50, d_in=3, num_classes=3, seed=3, symmetric=True)
    spec = checks.gcn_spec([3, 5, 3])
    params = checks.random_params(Model.build(spec), 3)
    targets = np.arange(0, 18, 3)
    ref = checks.engine_loss(g, spec, params, targets, P=1, exact=True)
    got = checks.engine_loss(g, spec, params, targets, P=3, exact=True)
    assert got[0] == ref[0]
    for k in ref[1]:
        assert np.array_equal(got[1][k], ref[1][k])
    assert np.array_equal(got[2], ref[2])


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3, 5]), st.sampled_from(["laplacian", "renormalized"]))
def test_forward_equals_dense_oracle(seed, P, mode):
    assert checks.oracle_diff(seed, P, mode=mode) < 1e-10


def test_backward_equals_dense_chain_rule():
    assert checks._backward_vs_dense(11) < 1e-8


def test_frames_released_after_backward():
    g = random_graph(10, 30, d_in=2, seed=5, symmetric=True)
    spec = ModelSpec((2, 3, 2), decoder="none")
    model = Model.build(spec)
    gp, coef = model.prepare(g)
    eng = Engine(gp, partition_even(gp, 2), coef)
    task = eng.new_task(build_view(gp, [0, 1], 2), model.programs, model.init_params(0))
    eng.forward(task)
    eng.decode_loss(task, model.decoder(), g.labels)
    eng.decode_backward(task)
    eng.backward(task)
    assert task.counters["frames_allocated"] == task.counters["frames_released"] > 0


# -- reduce

def _contrib(rng, n=6):
    """Contributions with distinct (partition, layer, op) keys, as the engine emits them."""
    keys = [(p, k, op) for p in range(4) for k in (1, 2) for op in range(4)]
    pick = rng.choice(len(keys), size=n, replace=False)
    return [Contribution(*keys[i], "W", rng.standard_normal((3, 2)) * 10.0 ** rng.integers(-8, 8)) for i in pick]


def test_reduce_single():
    c = Contribution(0, 1, 0, "W", np.array([[1.5, -2.0]]))
    assert np.array_equal(reduce_params([c])["W"], c.partial)


def test_reduce_permutation_invariant(rng):
    cs = _contrib(rng, 12)
    a = reduce_params(cs)
    b = reduce_params([cs[i] for i in rng.permutation(len(cs))])
    assert np.array_equal(a["W"], b["W"])


def test_reduce_exact_mode_regrouping(rng):
    # the same gradient split differently across partitions gives identical bits
    parts = rng.standard_normal((9, 3, 2)) * 10.0 ** rng.integers(-6, 6, size=(9, 1, 1))
    grouped_a = [Contribution(p, 1, 0, "W", sum(EXACT.partial_of(x) for x in chunk))
                 for p, chunk in enumerate((parts[:4], parts[4:]))]
    grouped_b = [Contribution(p, 1, 0, "W", sum(EXACT.partial_of(x) for x in chunk))
                 for p, chunk in enumerate((parts[:1], parts[1:7], parts[7:]))]
    a = reduce_params(grouped_a, EXACT)["W"]
    b = reduce_params(grouped_b, EXACT)["W"]
    assert np.array_equal(a, b)
    assert np.allclose(a, parts.sum(axis=0), rtol=1e-12)


def test_reduce_halves():
    G = np.array([[3.0, -1.0], [0.5, 8.0]])
    cs = [Contribution(0, 1, 0, "W", G / 2), Contribution(1, 1, 0, "W", G / 2)]
    assert np.array_equal(reduce_params(cs, FAST)["W"], G)


# -- transport

def test_transport_orders_by_sender():
    t = Transport(3)
    t.send("k", 2, 0, np.array([5]), np.zeros((1, 1)))
    t.send("k", 1, 0, np.array([4]), np.zeros((1, 1)))
    t.send("other", 1, 0, np.array([4]), np.zeros((1, 1)))
    got = t.receive(0, "k")
    assert [m.src for m in got] == [1, 2]
    assert t.pending() == 1
    with pytest.raises(TransportError):
        t.send("k", 0, 0, np.array([1]), np.zeros((1, 1)))
