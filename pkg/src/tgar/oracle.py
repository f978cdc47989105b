"""Dense reference implementations used as ground truth in tests.

Everything here works on explicit N x N matrices and is capped at
``MAX_NODES`` nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph_store import Graph

MAX_NODES = 256


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name in ("identity", "linear"):
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "leaky_relu":
        return np.where(x > 0, x, 0.2 * x)
    if name == "exp":
        return np.exp(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre: np.ndarray) -> np.ndarray:
    if name in ("identity", "linear"):
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(pre) ** 2
    if name == "leaky_relu":
        return np.where(pre > 0, 1.0, 0.2)
    if name == "exp":
        return np.exp(pre)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class DenseGraph:
    """``A[dst, src]`` adjacency, propagation matrix and features."""

    A: np.ndarray
    L: np.ndarray
    X: np.ndarray
    mode: str = "laplacian"

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_adjacency(cls, A: np.ndarray, X: np.ndarray | None = None, mode: str = "laplacian") -> "DenseGraph":
        A = np.asarray(A, dtype=np.float64)
        n = A.shape[0]
        if n > MAX_NODES:
            raise ValueError(f"dense oracle limited to {MAX_NODES} nodes")
        d = A.sum(axis=1)
        inv = np.zeros(n)
        inv[d > 0] = 1.0 / np.sqrt(d[d > 0])
        norm = inv[:, None] * A * inv[None, :]
        if mode == "laplacian":
            L = np.eye(n) - norm
        elif mode == "renormalized":
            L = norm
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return cls(A, L, np.zeros((n, 0)) if X is None else np.asarray(X, dtype=np.float64), mode)

    @classmethod
    def from_graph(cls, graph: Graph, mode: str = "laplacian", self_loops: bool = False) -> "DenseGraph":
        n = graph.num_nodes
        if n > MAX_NODES:
            raise ValueError(f"dense oracle limited to {MAX_NODES} nodes")
        A = np.zeros((n, n))
        np.add.at(A, (graph.dst, graph.src), graph.edge_weights)
        if self_loops:
            missing = np.diag(A) == 0
            has_loop = np.zeros(n, dtype=bool)
            has_loop[graph.src[graph.src == graph.dst]] = True
            A[np.diag_indices(n)] += np.where(missing & ~has_loop, 1.0, 0.0)
        return cls.from_adjacency(A, graph.node_features, mode)


@dataclass
class DenseTrace:
    """Forward intermediates: inputs H_{k-1}, pre-activations, outputs."""

    inputs: list
    pre: list
    outputs: list


def dense_gcn_forward(dg: DenseGraph, weights: Sequence[np.ndarray], activations: Sequence[str],
                      X: np.ndarray | None = None, trace: bool = False):
    """H_k = act_k(L H_{k-1} W_k) for k = 1..K with H_0 = X."""
    H = dg.X if X is None else np.asarray(X, dtype=np.float64)
    if len(weights) != len(activations):
        raise ValueError("one activation per weight")
    tr = DenseTrace([], [], [])
    for W, a in zip(weights, activations):
        if H.shape[1] != W.shape[0]:
            raise ValueError(f"shape mismatch {H.shape} x {W.shape}")
        tr.inputs.append(H)
        Z = dg.L @ (H @ W)
        tr.pre.append(Z)
        H = _act(a, Z)
        tr.outputs.append(H)
    return (H, tr) if trace else H


def dense_backward(dg: DenseGraph, weights: Sequence[np.ndarray], activations: Sequence[str],
                   upstream: np.ndarray, trace: DenseTrace):
    """Chain rule through the dense recursion.  Returns ``(dL/dX, [dL/dW_k])``."""
    if trace is None or len(trace.pre) != len(weights):
        raise ValueError("forward intermediates missing")
    G = np.asarray(upstream, dtype=np.float64)
    gW = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        Gz = G * _act_grad(activations[k], trace.pre[k])
        P = dg.L.T @ Gz
        gW[k] = (dg.L @ trace.inputs[k]).T @ Gz
        G = P @ weights[k].T
    return G, gW


def dense_model_loss(dg: DenseGraph, weights, activations, targets, labels, omega=None, omega_b=None,
                     X=None, weight_decay: float = 0.0, reg: Sequence[int] = ()):
    """Mean softmax cross-entropy over ``targets`` of a dense GCN stack plus decoder."""
    H = dense_gcn_forward(dg, weights, activations, X)
    logits = H[targets]
    if omega is not None:
        logits = logits @ omega + (0.0 if omega_b is None else omega_b)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(targets)), labels].mean()
    for k in reg:
        loss += 0.5 * weight_decay * np.sum(weights[k - 1] ** 2)
    return float(loss)


# --------------------------------------------------------------------------
# spectral filters


def power_iteration(M: np.ndarray, iters: int = 2000, tol: float = 1e-13, seed: int = 0) -> float:
    """Largest-magnitude eigenvalue of a symmetric matrix."""
    n = M.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_new = w / norm
        lam_new = float(v_new @ M @ v_new)
        if abs(lam_new - lam) < tol * max(1.0, abs(lam_new)):
            return lam_new
        v, lam = v_new, lam_new
    return lam


def lambda_max(dg: DenseGraph) -> float:
    return power_iteration(dg.L)


def scaled_laplacian(dg: DenseGraph, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError("lambda_max must be positive")
    return 2.0 * dg.L / lam - np.eye(dg.N)


def chebyshev_filter(dg: DenseGraph, x: np.ndarray, coeffs: Sequence[float], lam: float) -> np.ndarray:
    """sum_k theta_k T_k(L_hat) x via the three-term recursion (matvecs only)."""
    Lh = scaled_laplacian(dg, lam)
    x = np.asarray(x, dtype=np.float64)
    t_prev, t_cur = x, Lh @ x
    out = coeffs[0] * t_prev
    if len(coeffs) > 1:
        out = out + coeffs[1] * t_cur
    for c in coeffs[2:]:
        t_prev, t_cur = t_cur, 2.0 * (Lh @ t_cur) - t_prev
        out = out + c * t_cur
    return out


def chebyshev_terms(dg: DenseGraph, x: np.ndarray, K: int, lam: float) -> list:
    Lh = scaled_laplacian(dg, lam)
    terms = [np.asarray(x, dtype=np.float64)]
    if K >= 1:
        terms.append(Lh @ terms[0])
    for _ in range(2, K + 1):
        terms.append(2.0 * (Lh @ terms[-1]) - terms[-2])
    return terms


def chebyshev_to_power(coeffs: Sequence[float], lam: float) -> np.ndarray:
    """Coefficients eta with sum theta_k T_k(2L/lam - I) = sum eta_k L^k."""
    K = len(coeffs) - 1
    # T_k as polynomials in y, then substitute y = (2/lam) L - 1
    T = [np.array([1.0]), np.array([0.0, 1.0])]
    for _ in range(2, K + 1):
        nxt = np.zeros(len(T[-1]) + 1)
        nxt[1:] += 2.0 * T[-1]
        nxt[:len(T[-2])] -= T[-2]
        T.append(nxt)
    poly_y = np.zeros(K + 1)
    for k, c in enumerate(coeffs):
        poly_y[:len(T[k])] += c * T[k]
    sub = np.polynomial.Polynomial([-1.0, 2.0 / lam])
    out = np.polynomial.Polynomial([0.0])
    for k, c in enumerate(poly_y):
        out = out + c * sub ** k
    eta = np.zeros(K + 1)
    eta[:len(out.coef)] = out.coef
    return eta


def power_filter(dg: DenseGraph, x: np.ndarray, eta: Sequence[float]) -> np.ndarray:
    """sum_k eta_k L^k x with explicit matrix powers (brute force)."""
    out = np.zeros_like(np.asarray(x, dtype=np.float64))
    Lk = np.eye(dg.N)
    for c in eta:
        out = out + c * (Lk @ x)
        Lk = Lk @ dg.L
    return out


def nested_filter(dg: DenseGraph, x: np.ndarray, eta: Sequence[float]) -> np.ndarray:
    """Horner-style nesting with ratios eta_k / eta_{k-1}; needs nonzero coefficients."""
    eta = [float(e) for e in eta]
    if any(e == 0.0 for e in eta[:-1]):
        raise ValueError("nested form needs nonzero coefficients")
    h = np.asarray(x, dtype=np.float64)
    for k in range(len(eta) - 1, 0, -1):
        h = x + (eta[k] / eta[k - 1]) * (dg.L @ h)
    return eta[0] * h
