"""Verification suite: finite differences and dense-oracle comparisons.

Used by the ``gradcheck`` and ``oracle`` CLI commands and by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import oracle
from .datasets import random_graph
from .engine import Engine
from .graph_store import Graph
from .models import Model, ModelSpec, regularization
from .partitioner import partition_even
from .view import build_view, full_view


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    kind: str = "rel"

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.tol)

    def __str__(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.kind} err {self.value:.3e} (tol {self.tol:g})"


# --------------------------------------------------------------------------
# engine-level helpers


def engine_loss(graph: Graph, spec: ModelSpec, params: Mapping[str, np.ndarray], targets, P: int = 1,
                exact: bool = False, X: np.ndarray | None = None, want_grads: bool = True, seed: int = 0,
                contiguous: bool = False):
    """Loss (and gradients) of ``spec`` on ``graph`` through the partitioned engine.

    Returns ``(loss, grads, input_grad)``; ``input_grad`` is dL/dX.
    """
    model = Model.build(spec)
    g, coef = model.prepare(graph)
    plan = partition_even(g, P, seed=seed, contiguous=contiguous)
    eng = Engine(g, plan, coef, exact=exact)
    view = build_view(g, targets, spec.K)
    task = eng.new_task(view, model.programs, params, h0=X, input_grad=want_grads)
    eng.forward(task)
    loss, _ = eng.decode_loss(task, model.decoder(), graph.labels)
    reg, reg_g = regularization(params, model.reg_params(), spec.weight_decay, eng.numerics)
    loss += reg
    if not want_grads:
        return loss, None, None
    eng.decode_backward(task)
    grads = eng.backward(task)
    for k, v in reg_g.items():
        grads[k] = grads.get(k, 0.0) + v
    for k, v in params.items():
        grads.setdefault(k, np.zeros_like(v))
    return loss, grads, eng.input_grad(task)


def engine_forward(graph: Graph, spec: ModelSpec, params, P: int = 1, exact: bool = False, seed: int = 0,
                   contiguous: bool = False, X=None) -> np.ndarray:
    """h^K for every node (full view)."""
    model = Model.build(spec)
    g, coef = model.prepare(graph)
    eng = Engine(g, partition_even(g, P, seed=seed, contiguous=contiguous), coef, exact=exact)
    task = eng.new_task(full_view(g, spec.K), model.programs, params, h0=X)
    eng.forward(task)
    return eng.layer_output(task, spec.K)


def fd_engine_check(graph: Graph, spec: ModelSpec, params, targets, eps: float = 1e-6, P: int = 1,
                    include_inputs: bool = True, name: str = "engine", corrupt: bool = False) -> CheckResult:
    """Max relative error of engine gradients against central differences.

    ``corrupt`` flips the sign of the analytic gradients (harness self-test).
    """
    _, grads, gx = engine_loss(graph, spec, params, targets, P)
    if corrupt:
        grads = {k: -v for k, v in grads.items()}
        gx = -gx
    X = np.array(graph.node_features)
    worst = 0.0

    def loss_at(p=None, x=None):
        return engine_loss(graph, spec, p or params, targets, P, X=x, want_grads=False)[0]

    for name_p, w in params.items():
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            up, dn = dict(params), dict(params)
            up[name_p] = w.copy(); up[name_p][idx] += eps
            dn[name_p] = w.copy(); dn[name_p][idx] -= eps
            fd[idx] = (loss_at(up) - loss_at(dn)) / (2 * eps)
        worst = max(worst, ad.rel_error(grads[name_p], fd))
    if include_inputs:
        fd = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            up, dn = X.copy(), X.copy()
            up[idx] += eps
            dn[idx] -= eps
            fd[idx] = (loss_at(x=up) - loss_at(x=dn)) / (2 * eps)
        worst = max(worst, ad.rel_error(gx, fd))
    return CheckResult(name, worst, 1e-5)


# --------------------------------------------------------------------------
# suite


def gcn_spec(dims, normalization="laplacian", decoder="linear", classes=3, **kw) -> ModelSpec:
    return ModelSpec(tuple(dims), num_classes=classes, decoder=decoder, normalization=normalization, **kw)


def random_params(model: Model, seed: int, scale_decoder: bool = True) -> dict:
    """Random parameters including a non-zero decoder, so every gradient path is exercised."""
    params = model.init_params(seed)
    rng = np.random.default_rng(seed + 1000)
    for k in list(params):
        if k.startswith("omega") and scale_decoder:
            params[k] = rng.standard_normal(params[k].shape) * 0.5
    return params


def oracle_diff(seed: int, P: int, K: int | None = None, n: int | None = None,
                mode: str = "laplacian") -> float:
    """Max abs difference of engine GCN forward vs the dense recursion."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 33))
    K = K or int(rng.integers(1, 4))
    m = int(rng.integers(0, n * 3 + 1))
    g = random_graph(n, m, d_in=int(rng.integers(1, 6)), seed=seed, weighted=bool(seed % 2),
                     symmetric=bool(seed % 3 == 0))
    dims = [g.feature_dim] + [int(rng.integers(1, 6)) for _ in range(K)]
    acts = tuple(rng.choice(["relu", "tanh", "identity"]) for _ in range(K))
    spec = ModelSpec(tuple(dims), activations=acts, decoder="none", normalization=mode, self_loops=True)
    model = Model.build(spec)
    params = model.init_params(seed)
    out = engine_forward(g, spec, params, P=min(P, n), seed=seed)
    dg = oracle.DenseGraph.from_graph(g, mode, self_loops=True)
    ref = oracle.dense_gcn_forward(dg, [params[f"W{k}"] for k in range(1, K + 1)], acts)
    return float(np.max(np.abs(out - ref), initial=0.0))


def run_suite(inject_fault: str | None = None, seed: int = 0, quick: bool = False) -> list[CheckResult]:
    """Default verification suite.  ``inject_fault`` names a check whose
    backward is deliberately corrupted (harness self-test)."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def tape_check(name, f, inputs, params=(), tol=1e-6):
        back = None
        if inject_fault == name:
            def back(tape, out, cot):
                tape.backward([(out, -cot)])
        rep = ad.grad_check(f, inputs, params, tol=tol, name=name, seed=seed, backward=back)
        results.append(CheckResult(name, rep.max_rel_error, tol))

    W = ad.Param("W", rng.standard_normal((4, 2)))
    tape_check("linear", lambda t, x: ad.linear(t, x, t.param(W)), {"x": rng.standard_normal((3, 4))}, [W])
    tape_check("relu", lambda t, x: ad.relu(t, x), {"x": rng.standard_normal((4, 3)) + 0.05})
    tape_check("tanh", lambda t, x: ad.tanh(t, x), {"x": rng.standard_normal((5, 1))})
    tape_check("exp", lambda t, x: ad.exp(t, x), {"x": rng.standard_normal((3, 3))})
    tape_check("add_mul_scale", lambda t, a, b: ad.scale(t, ad.mul(t, ad.add(t, a, b), b), 0.7),
               {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 2))})
    labels = rng.integers(0, 4, size=5)
    tape_check("softmax_xent", lambda t, z: ad.softmax_xent(t, z, labels), {"z": rng.standard_normal((5, 4))})
    tape_check("row_scale_concat", lambda t, x, w: ad.concat(t, [ad.row_scale(t, x, w), x]),
               {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((4, 1))})

    # proj -> relu -> prop on a 5-node graph, written directly on the tape
    g5 = random_graph(5, 8, d_in=3, seed=seed, self_loops=True)
    Wp = ad.Param("Wp", rng.standard_normal((3, 2)))
    src, dst = g5.src, g5.dst

    def composed(t, x):
        n = ad.relu(t, ad.linear(t, x, t.param(Wp)))
        msgs = ad.row_scale(t, _take_rows(t, n, src), t.const(g5.edge_weights[:, None]))
        return _segment(t, msgs, dst, 5)

    tape_check("proj_relu_prop", composed, {"x": rng.standard_normal((5, 3))}, [Wp], tol=1e-5)

    # engine: 2-layer GCN and 1-layer edge attention
    g6 = random_graph(6, 12, d_in=3, num_classes=3, seed=seed + 1, symmetric=True)
    spec = gcn_spec([3, 4, 3], weight_decay=5e-4)
    params = random_params(Model.build(spec), seed)
    results.append(fd_engine_check(g6, spec, params, np.arange(6), name="engine_gcn2",
                                   corrupt=inject_fault == "engine_gcn2"))
    g5e = random_graph(5, 9, d_in=3, num_classes=2, seed=seed + 2, edge_dim=3)
    gspec = ModelSpec((3, 2), kinds=("gat_edge",), activations=("tanh",), num_classes=2, edge_dim=3,
                      self_loops=False)
    gparams = random_params(Model.build(gspec), seed)
    results.append(fd_engine_check(g5e, gspec, gparams, np.arange(5), name="engine_gat_edge",
                                   corrupt=inject_fault == "engine_gat_edge"))

    # engine vs dense oracle, several partition counts
    worst = max(oracle_diff(seed * 100 + i, P) for i in range(3 if quick else 10) for P in (1, 2, 3, 5))
    results.append(_maybe_fault(CheckResult("oracle_forward_P_sweep", worst, 1e-10, "abs"), inject_fault))

    # engine backward vs dense chain rule
    results.append(_maybe_fault(CheckResult("oracle_backward", _backward_vs_dense(seed), 1e-8, "abs"), inject_fault))

    # Chebyshev recursion vs explicit powers
    results.append(_maybe_fault(CheckResult("chebyshev_vs_powers", _chebyshev_check(seed), 1e-10, "abs"), inject_fault))

    # P-invariance of gradients in exact mode
    results.append(_maybe_fault(CheckResult("partition_invariance", _bitwise_check(seed), 0.5, "mismatches"),
                                inject_fault))
    return results


def _maybe_fault(res: CheckResult, fault: str | None) -> CheckResult:
    if fault == res.name:
        return CheckResult(res.name, float("inf"), res.tol, res.kind)
    return res


def _take_rows(tape: ad.Tape, x: ad.Var, idx: np.ndarray) -> ad.Var:
    n = x.value.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return tape.record("take_rows", x.value[idx], (x,), back)


def _segment(tape: ad.Tape, x: ad.Var, seg: np.ndarray, count: int) -> ad.Var:
    out = np.zeros((count,) + x.value.shape[1:])
    np.add.at(out, seg, x.value)
    return tape.record("segment_sum", out, (x,), lambda g: (g[seg],))


def _backward_vs_dense(seed: int) -> float:
    worst = 0.0
    for i in range(5):
        rng = np.random.default_rng(seed * 31 + i)
        n = int(rng.integers(3, 9))
        g = random_graph(n, int(rng.integers(1, 2 * n)), d_in=3, seed=seed * 31 + i, symmetric=True)
        acts = ("tanh", "identity")
        spec = ModelSpec((3, 3, 2), activations=acts, decoder="none", num_classes=2)
        model = Model.build(spec)
        params = model.init_params(i)
        gp, coef = model.prepare(g)
        eng = Engine(gp, partition_even(gp, 2 if n > 2 else 1, seed=i), coef)
        task = eng.new_task(full_view(gp, 2), model.programs, params, input_grad=True)
        eng.forward(task)
        up = rng.standard_normal((n, 2))
        for p in range(eng.P):
            task.g_h[2][p] = up[task.layouts[2][p].a_rows]
        grads = eng.backward(task)
        gx = eng.input_grad(task)
        dg = oracle.DenseGraph.from_graph(g, "laplacian", self_loops=True)
        Ws = [params["W1"], params["W2"]]
        _, tr = oracle.dense_gcn_forward(dg, Ws, acts, trace=True)
        dX, dW = oracle.dense_backward(dg, Ws, acts, up, tr)
        worst = max(worst, np.max(np.abs(gx - dX)), np.max(np.abs(grads["W1"] - dW[0])),
                    np.max(np.abs(grads["W2"] - dW[1])))
    return float(worst)


def _chebyshev_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    g = random_graph(6, 10, seed=seed, symmetric=True, self_loops=True)
    dg = oracle.DenseGraph.from_graph(g)
    lam = oracle.lambda_max(dg)
    coeffs = rng.uniform(0.5, 1.5, size=4)
    x = rng.standard_normal(6)
    a = oracle.chebyshev_filter(dg, x, coeffs, lam)
    b = oracle.power_filter(dg, x, oracle.chebyshev_to_power(coeffs, lam))
    return float(np.max(np.abs(a - b)))


def _bitwise_check(seed: int) -> float:
    """Number of partition counts whose exact-mode loss/grads differ from P=1."""
    g = random_graph(24, 60, d_in=3, seed=seed, symmetric=True)
    spec = gcn_spec([3, 4, 3])
    params = random_params(Model.build(spec), seed)
    ref = engine_loss(g, spec, params, np.arange(0, 24, 2), P=1, exact=True)
    bad = 0
    for P in (2, 3, 5):
        out = engine_loss(g, spec, params, np.arange(0, 24, 2), P=P, exact=True)
        same = out[0] == ref[0] and all(np.array_equal(out[1][k], ref[1][k]) for k in ref[1])
        bad += 0 if same else 1
    return float(bad)


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [str(r) for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
