"""Concrete message-passing models expressed as layer programs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .engine import LayerProgram
from .graph_store import NORMALIZATIONS, Graph, gcn_edge_weights

KINDS = ("gcn", "gat_edge", "identity")
DECODERS = ("linear", "none")


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack description.

    ``dims`` is ``[d_in, d_1, ..., d_K]``; ``activations`` has one entry per
    layer.  ``decoder="linear"`` maps ``d_K`` to ``num_classes`` with a
    zero-initialised weight; ``"none"`` uses ``h^K`` as the logits.
    ``reg_layers`` lists the layers whose weights get L2 regularisation.
    """

    dims: tuple
    kinds: tuple = ()
    activations: tuple = ()
    num_classes: int = 0
    decoder: str = "linear"
    acc: str = "sum"
    keep_prob: float = 1.0
    weight_decay: float = 0.0
    reg_layers: tuple = (1,)
    normalization: str = "laplacian"
    self_loops: bool = True
    edge_dim: int = 0
    bias: bool = False
    mean_degree: str = "view"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        K = len(dims) - 1
        if K < 1:
            raise ValueError("need at least one layer")
        if not self.kinds:
            object.__setattr__(self, "kinds", ("gcn",) * K)
        if not self.activations:
            object.__setattr__(self, "activations", ("relu",) * (K - 1) + ("identity",))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "reg_layers", tuple(int(r) for r in self.reg_layers))
        if len(self.kinds) != K or len(self.activations) != K:
            raise ValueError("kinds/activations must have one entry per layer")
        for kind in self.kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown layer kind {kind!r}")
        for a in self.activations:
            ad.activation(a)
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.decoder == "none" and self.num_classes and self.num_classes != dims[-1]:
            raise ValueError("decoder 'none' needs dims[-1] == num_classes")
        if self.decoder == "linear" and self.num_classes < 1:
            raise ValueError("a linear decoder needs num_classes >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if any(d <= 0 for d in dims):
            raise ValueError("dims must be positive")

    @property
    def K(self) -> int:
        return len(self.dims) - 1

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.decoder == "linear" else self.dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# layer programs


def _linear_transform(k: int, bias: bool):
    def transform(tape, h, P):
        return ad.linear(tape, h, P(f"W{k}"), P(f"b{k}") if bias else None)
    return transform


def _apply_activation(name: str):
    act = ad.activation(name)

    def apply(tape, n, M, P):
        return act(tape, M)
    return apply


def gcn_program(k: int, activation: str = "relu", keep_prob: float = 1.0, bias: bool = False,
                acc: str = "sum", mean_degree: str = "view") -> LayerProgram:
    """n = h W_k; message = c_e * n_src; M = sum; h = act(M).

    The message carries the *source* projection, so one layer computes
    ``act(L (H W))`` row by row.
    """

    def gather(tape, n_src, n_dst, e, c, P):
        return ad.row_scale(tape, n_src, c), None

    names = (f"W{k}",) + ((f"b{k}",) if bias else ())
    return LayerProgram(f"gcn{k}", _linear_transform(k, bias), gather, acc,
                        _apply_activation(activation), names, keep_prob=keep_prob, mean_degree=mean_degree)


def gat_edge_program(k: int, activation: str = "relu", edge_dim: int = 0, keep_prob: float = 1.0,
                     bias: bool = False, slope: float = 0.2) -> LayerProgram:
    """Edge-featured attention.

    score = leaky_relu([n_dst | n_src | e W_e] a), message = n_src, and M is
    the softmax(score)-weighted sum of messages over active in-edges.
    """

    def gather(tape, n_src, n_dst, e, c, P):
        parts = [n_dst, n_src]
        if edge_dim:
            parts.append(ad.linear(tape, e, P(f"We{k}")))
        s = ad.leaky_relu(tape, ad.linear(tape, ad.concat(tape, parts), P(f"a{k}")), slope)
        return n_src, s

    names = (f"W{k}", f"a{k}") + ((f"We{k}",) if edge_dim else ()) + ((f"b{k}",) if bias else ())
    return LayerProgram(f"gat_edge{k}", _linear_transform(k, bias), gather, "weighted",
                        _apply_activation(activation), names, uses_dst=True,
                        uses_edge_features=bool(edge_dim), keep_prob=keep_prob)


def identity_program(acc: str = "sum") -> LayerProgram:
    """transform = id, message = source value, h = M."""
    return LayerProgram(
        "identity",
        lambda tape, h, P: h,
        lambda tape, n_src, n_dst, e, c, P: (n_src, None),
        acc,
        lambda tape, n, M, P: M,
    )


# --------------------------------------------------------------------------
# model


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


@dataclass
class Model:
    spec: ModelSpec
    programs: list = field(default_factory=list)

    @classmethod
    def build(cls, spec: ModelSpec) -> "Model":
        progs = []
        for k in range(1, spec.K + 1):
            kind, act = spec.kinds[k - 1], spec.activations[k - 1]
            if kind == "gcn":
                progs.append(gcn_program(k, act, spec.keep_prob, spec.bias, spec.acc, spec.mean_degree))
            elif kind == "gat_edge":
                progs.append(gat_edge_program(k, act, spec.edge_dim, spec.keep_prob, spec.bias))
            else:
                progs.append(identity_program(spec.acc))
        return cls(spec, progs)

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        """Glorot-uniform weights, zero biases and zero decoder."""
        rng = np.random.default_rng(seed)
        s = self.spec
        out: dict[str, np.ndarray] = {}
        for k in range(1, s.K + 1):
            a, b = s.dims[k - 1], s.dims[k]
            kind = s.kinds[k - 1]
            if kind == "identity":
                continue
            out[f"W{k}"] = glorot(rng, a, b)
            if s.bias:
                out[f"b{k}"] = np.zeros(b)
            if kind == "gat_edge":
                width = 2 * b + (b if s.edge_dim else 0)
                out[f"a{k}"] = glorot(rng, width, 1)
                if s.edge_dim:
                    out[f"We{k}"] = glorot(rng, s.edge_dim, b)
        if s.decoder == "linear":
            out["omega"] = np.zeros((s.dims[-1], s.num_classes))
            out["omega_b"] = np.zeros(s.num_classes)
        return out

    def reg_params(self) -> list[str]:
        return [f"W{k}" for k in self.spec.reg_layers if 1 <= k <= self.spec.K and self.spec.kinds[k - 1] != "identity"]

    def decoder(self) -> Callable:
        if self.spec.decoder == "none":
            return lambda tape, h, P: h
        return lambda tape, h, P: ad.linear(tape, h, P("omega"), P("omega_b"))

    def prepare(self, graph: Graph) -> tuple[Graph, np.ndarray]:
        """Propagation graph and per-edge coefficients.

        GCN layers need the diagonal of the propagation matrix carried by
        self-loop edges, so the laplacian mode adds zero-weight loops where
        none exist (the weight leaves degrees untouched).
        """
        s = self.spec
        g = graph.with_self_loops(1.0) if s.self_loops else graph
        if "gcn" in s.kinds:
            if s.normalization == "laplacian":
                g = g.with_self_loops(0.0)
            return g, gcn_edge_weights(g, s.normalization)
        return g, g.edge_weights.copy()


def regularization(params: dict, names, weight_decay: float, numerics=ad.FAST) -> tuple[float, dict]:
    """``weight_decay/2 * sum ||W||^2`` and its gradient."""
    if weight_decay == 0.0 or not names:
        return 0.0, {}
    total = 0.0
    grads = {}
    for name in names:
        w = params[name]
        sq = (w * w).reshape(-1, 1)
        total += float(numerics.finalize(numerics.total(sq))[0])
        grads[name] = weight_decay * w
    return 0.5 * weight_decay * total, grads


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def macro_f1(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else float("nan")
