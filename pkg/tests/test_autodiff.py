import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tgar import autodiff as ad
from tgar import reprosum


def test_linear_identity_input():
    out = ad.linear_forward(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert out.tolist() == [[1, 2], [3, 4]]


def test_linear_zero_weight(rng):
    assert not np.any(ad.linear_forward(rng.standard_normal((5, 3)), np.zeros((3, 4))))


def test_linear_grad_check(rng):
    W = ad.Param("W", rng.standard_normal((4, 2)))
    rep = ad.grad_check(lambda t, x: ad.linear(t, x, t.param(W)), {"x": rng.standard_normal((3, 4))}, [W],
                        eps=1e-6, tol=1e-6)
    assert rep.passed, rep


def test_linear_shape_errors(rng):
    with pytest.raises(ad.ShapeError):
        ad.linear_forward(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.linear_forward(np.ones((2, 2)), np.ones((2, 2)), np.ones(3))


def test_relu_values_and_subgradient():
    t = ad.Tape()
    x = t.leaf([[-1.0, 0.0, 2.0]])
    y = ad.relu(t, x)
    assert y.value.tolist() == [[0, 0, 2]]
    t.backward([(y, np.ones((1, 3)))])
    assert x.grad.tolist() == [[0, 0, 1]]


def test_tanh_grad_check(rng):
    rep = ad.grad_check(lambda t, x: ad.tanh(t, x), {"x": rng.standard_normal((5, 1))}, tol=1e-6)
    assert rep.passed


def test_uniform_logits_loss():
    loss, _ = ad.softmax_xent_forward(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_saturated_row():
    logits = np.array([[10.0, -10.0]])
    loss, probs = ad.softmax_xent_forward(logits, np.array([0]))
    p1 = 1.0 / (1.0 + math.exp(20.0))
    assert loss == pytest.approx(-math.log1p(-p1), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    g = ad.softmax_xent_backward(probs, np.array([0]))
    assert g[0] == pytest.approx([-p1, p1], rel=1e-9)


def test_softmax_grad_check(rng):
    labels = rng.integers(0, 4, size=6)
    rep = ad.grad_check(lambda t, z: ad.softmax_xent(t, z, labels), {"z": rng.standard_normal((6, 4))})
    assert rep.passed


def test_corrupted_backward_fails(rng):
    def flipped(tape, out, cot):
        tape.backward([(out, -cot)])
    rep = ad.grad_check(lambda t, x: ad.tanh(t, x), {"x": rng.standard_normal((4, 2))}, backward=flipped)
    assert not rep.passed
    assert str(rep).startswith("FAIL")


def test_unknown_activation():
    with pytest.raises(ValueError):
        ad.activation("swish")


def test_shape_mismatch_is_error():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.add(t, t.leaf(np.ones((2, 2))), t.leaf(np.ones((2, 1))))


def test_non_finite_leaf_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tape().leaf([np.nan])


def test_dropout_masks_and_scales():
    t = ad.Tape()
    x = t.leaf(np.ones((2, 2)))
    mask = np.array([[True, False], [False, True]])
    y = ad.dropout(t, x, mask, 0.5)
    assert y.value.tolist() == [[2, 0], [0, 2]]


def _graph_fn(seed):
    rng = np.random.default_rng(seed)
    W = ad.Param("W", rng.standard_normal((3, 3)))

    def f(t, x):
        h = ad.tanh(t, ad.linear(t, x, t.param(W)))
        return ad.total(t, ad.mul(t, h, h))
    return W, f, rng.standard_normal((4, 3))


def test_replay_determinism():
    W, f, x = _graph_fn(0)
    grads = []
    for _ in range(2):
        t = ad.Tape()
        xv = t.leaf(x)
        out = f(t, xv)
        t.backward([(out, np.ones_like(out.value))])
        grads.append((xv.grad.copy(), t.param_grads()["W"].copy()))
    assert np.array_equal(grads[0][0], grads[1][0]) and np.array_equal(grads[0][1], grads[1][1])


def test_accumulation_linearity():
    W, f, x = _graph_fn(1)
    for _ in range(2):
        t = ad.Tape()
        out = f(t, t.leaf(x, needs_grad=False))
        t.backward([(out, np.ones_like(out.value))])
        t.accumulate_param_grads()
        if _ == 0:
            once = W.grad.copy()
    assert np.array_equal(W.grad, 2 * once)


def test_tape_replays_once():
    t = ad.Tape()
    y = ad.tanh(t, t.leaf([[1.0]]))
    t.backward([(y, np.ones((1, 1)))])
    with pytest.raises(RuntimeError):
        t.backward([(y, np.ones((1, 1)))])


PRIMITIVES = {
    "relu": (1, lambda t, a: ad.relu(t, a)),
    "leaky_relu": (1, lambda t, a: ad.leaky_relu(t, a)),
    "tanh": (1, lambda t, a: ad.tanh(t, a)),
    "exp": (1, lambda t, a: ad.exp(t, a)),
    "identity": (1, lambda t, a: ad.identity(t, a)),
    "scale": (1, lambda t, a: ad.scale(t, a, -1.3)),
    "add": (2, lambda t, a, b: ad.add(t, a, b)),
    "sub": (2, lambda t, a, b: ad.sub(t, a, b)),
    "mul": (2, lambda t, a, b: ad.mul(t, a, b)),
    "concat": (2, lambda t, a, b: ad.concat(t, [a, b])),
    "total": (1, lambda t, a: ad.total(t, a)),
}


@given(st.sampled_from(sorted(PRIMITIVES)), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_every_primitive_matches_finite_differences(name, n, m, seed):
    arity, f = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    inputs = {}
    for i in range(arity):
        x = rng.standard_normal((n, m))
        if name in ("relu", "leaky_relu"):
            x = np.where(np.abs(x) < 1e-3, 0.1, x)  # keep away from the kink
        inputs["ab"[i]] = x
    rep = ad.grad_check(lambda t, **kw: f(t, *[kw[k] for k in sorted(kw)]), inputs, seed=seed, tol=1e-5)
    assert rep.passed, rep


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_linear_and_row_scale_random_shapes(n, a, b, seed):
    rng = np.random.default_rng(seed)
    W = ad.Param("W", rng.standard_normal((a, b)))
    B = ad.Param("B", rng.standard_normal(b))
    rep = ad.grad_check(lambda t, x, c: ad.row_scale(t, ad.linear(t, x, t.param(W), t.param(B)), c),
                        {"x": rng.standard_normal((n, a)), "c": rng.standard_normal((n, 1))}, [W, B], seed=seed,
                        tol=1e-5)
    assert rep.passed, rep


# -- reproducible sums

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(np.float64, st.integers(1, 60), elements=finite), st.integers(0, 2**31))
def test_reprosum_order_independent(x, seed):
    perm = np.random.default_rng(seed).permutation(len(x))
    a = reprosum.total(x[:, None])
    b = reprosum.total(x[perm][:, None])
    assert np.array_equal(a, b)
    assert a[0] == pytest.approx(math.fsum(x.tolist()), abs=1e-9 * max(1.0, np.abs(x).sum()))


@given(hnp.arrays(np.float64, st.integers(2, 40), elements=finite), st.integers(1, 39))
def test_reprosum_grouping_independent(x, cut):
    cut = min(cut, len(x) - 1)
    bins = reprosum.split(x[:, None])
    whole = reprosum.finalize(bins.sum(axis=1))
    parts = reprosum.finalize(bins[:, :cut].sum(axis=1) + bins[:, cut:].sum(axis=1))
    assert np.array_equal(whole, parts)


def test_reprosum_overflow():
    with pytest.raises(reprosum.AccumulatorOverflow):
        reprosum.split(np.array([2.0**41]))


def test_exact_matmul_is_row_reproducible(rng):
    x = rng.standard_normal((50, 7))
    w = rng.standard_normal((7, 3))
    full = reprosum.matmul(x, w)
    for rows in (slice(0, 1), slice(3, 17), slice(20, 50)):
        assert np.array_equal(reprosum.matmul(x[rows], w), full[rows])
    assert np.allclose(full, x @ w, atol=1e-12)


@pytest.mark.parametrize("density", [0.05, 0.9])
def test_outer_bins_grouping_invariant(rng, density):
    x = rng.standard_normal((40, 6)) * (rng.random((40, 6)) < density)
    g = rng.standard_normal((40, 3))
    whole = reprosum.finalize(reprosum.outer_bins(x, g))
    split = reprosum.finalize(reprosum.outer_bins(x[:13], g[:13]) + reprosum.outer_bins(x[13:], g[13:]))
    assert np.array_equal(whole, split)
    assert np.allclose(whole, x.T @ g, atol=1e-12)
