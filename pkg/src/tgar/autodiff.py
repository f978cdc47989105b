"""Dense NN primitives with paired forward/backward, and a reverse-mode tape.

A user function (projection, propagation, apply, decoder) is written as a
sequence of primitive calls on a :class:`Tape`.  ``Tape.backward`` replays the
backward versions in exact reverse order.  Parameters only enter through
:func:`linear`; their gradients are kept as *partials* produced by the tape's
numerics policy so the engine can ship them between workers and reduce them
deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import reprosum


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# --------------------------------------------------------------------------
# numerics policies


class FastNumerics:
    """Plain float64 arithmetic; partials are ndarrays."""

    exact = False

    def matmul(self, x, w):
        return x @ w

    def weight_grad(self, x, g):
        return x.T @ g

    def colsum(self, g):
        return g.sum(axis=0)

    def rowsum(self, x):
        return x.sum(axis=1)

    def total(self, x):
        return self.colsum(x)

    def segment_sum(self, values, segments, count):
        out = np.zeros((count,) + values.shape[1:])
        if len(values):
            order = np.argsort(segments, kind="stable")
            np.add.at(out, segments[order], values[order])
        return out

    def merge(self, partials):
        it = iter(partials)
        acc = np.array(next(it), dtype=np.float64, copy=True)
        for p in it:
            acc += p
        return acc

    def finalize(self, partial):
        return np.asarray(partial, dtype=np.float64)

    # partials indexed by row (row axis 0 here, 1 for binned partials)

    def partial_of(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    def partial_zeros(self, shape):
        return np.zeros(shape)

    def partial_rows(self, partial, idx):
        return partial[idx]

    def partial_add_rows(self, partial, idx, part) -> None:
        partial[idx] += part


class ExactNumerics(FastNumerics):
    """Reproducible arithmetic; partials are binned accumulators.

    Every reduction result is independent of row grouping and order, so
    splitting work across partitions cannot change a single bit.
    """

    exact = True

    def matmul(self, x, w):
        return reprosum.matmul(x, w)

    def weight_grad(self, x, g):
        return reprosum.outer_bins(x, g)

    def colsum(self, g):
        return reprosum.split(g).sum(axis=1)

    def rowsum(self, x):
        return reprosum.finalize(reprosum.split(x).sum(axis=2))

    def segment_sum(self, values, segments, count):
        return reprosum.segment_bins(values, segments, count)

    def merge(self, partials):
        it = iter(partials)
        acc = np.array(next(it), copy=True)
        for p in it:
            acc += p
        return acc

    def finalize(self, partial):
        return reprosum.finalize(partial)

    def partial_of(self, x):
        return reprosum.split(x)

    def partial_zeros(self, shape):
        return np.zeros((reprosum.NBINS,) + tuple(shape))

    def partial_rows(self, partial, idx):
        return partial[:, idx]

    def partial_add_rows(self, partial, idx, part) -> None:
        partial[:, idx] += part


FAST = FastNumerics()
EXACT = ExactNumerics()


def numerics(exact: bool) -> FastNumerics:
    return EXACT if exact else FAST


# --------------------------------------------------------------------------
# parameters and variables


class Param:
    """A trainable tensor with a gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class Var:
    __slots__ = ("value", "grad", "needs_grad", "param")

    def __init__(self, value: np.ndarray, needs_grad: bool, param: Param | None = None):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" param={self.param.name}" if self.param is not None else ""
        return f"Var(shape={self.value.shape}{tag})"


@dataclass
class _Op:
    name: str
    out: Var
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of executed primitives."""

    numerics: FastNumerics = FAST
    ops: list = field(default_factory=list)
    _params: dict = field(default_factory=dict)
    _done: bool = False

    def leaf(self, value, needs_grad: bool = True, check: bool = True) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if check:
            check_finite(value, "leaf")
        return Var(value, needs_grad)

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), False)

    def bind(self, name: str, value: np.ndarray) -> Var:
        """Parameter Var for a snapshot value; one Var per name per tape."""
        v = self._params.get(name)
        if v is None:
            v = self.param(Param(name, value))
        return v

    def param(self, p: Param) -> Var:
        v = self._params.get(p.name)
        if v is None:
            v = Var(p.value, True, p)
            self._params[p.name] = v
        return v

    def record(self, name: str, value: np.ndarray, inputs: Sequence[Var], backward) -> Var:
        check_finite(value, name)
        out = Var(value, any(v.needs_grad for v in inputs))
        if out.needs_grad:
            self.ops.append(_Op(name, out, tuple(inputs), backward))
        return out

    def backward(self, seeds: Iterable[tuple[Var, np.ndarray]]) -> None:
        if self._done:
            raise RuntimeError("tape already replayed")
        self._done = True
        for v, g in seeds:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != v.value.shape:
                raise ShapeError(f"seed gradient shape {g.shape} != {v.value.shape}")
            _accumulate(self.numerics, v, g)
        for op in reversed(self.ops):
            if op.out.grad is None:
                continue
            grads = op.backward(op.out.grad)
            for inp, gi in zip(op.inputs, grads):
                if gi is not None and inp.needs_grad:
                    _accumulate(self.numerics, inp, gi)

    def accumulate_param_grads(self) -> None:
        """Add this tape's finalized gradients into each bound ``Param.grad``."""
        for v in self._params.values():
            if v.grad is not None and v.param is not None:
                v.param.grad += self.numerics.finalize(v.grad)

    def param_grads(self) -> dict[str, object]:
        """Gradient partials for every parameter touched by this tape."""
        return {name: v.grad for name, v in self._params.items() if v.grad is not None}


def _accumulate(num: FastNumerics, v: Var, g) -> None:
    if v.param is not None:
        v.grad = g if v.grad is None else num.merge([v.grad, g])
    else:
        check_finite(g, "gradient")
        v.grad = g.copy() if v.grad is None else v.grad + g


def _no_param(*vs: Var) -> None:
    for v in vs:
        if v.param is not None:
            raise TypeError(f"parameter {v.param.name!r} may only enter through linear()")


def _same_shape(a: Var, b: Var, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# --------------------------------------------------------------------------
# explicit forward/backward pairs


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, num=FAST) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    out = num.matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} for output width {w.shape[1]}")
        out = out + b
    return out


def linear_backward(grad_out, x, w, with_bias: bool, num=FAST, need_x: bool = True, need_w: bool = True):
    """Return ``(grad_x, grad_w_partial, grad_b_partial | None)``; skipped terms are None."""
    grad_x = num.matmul(grad_out, np.ascontiguousarray(w.T)) if need_x else None
    grad_w = num.weight_grad(x, grad_out) if need_w else None
    grad_b = num.colsum(grad_out) if with_bias else None
    return grad_x, grad_w, grad_b


def log_softmax(logits: np.ndarray, num=FAST) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(num.rowsum(np.exp(shifted)))[:, None]


def softmax_xent_forward(logits: np.ndarray, labels: np.ndarray, num=FAST):
    """Mean cross-entropy over rows.  Returns ``(loss, probs)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("softmax cross-entropy over an empty label set")
    if logits.shape[0] != len(labels):
        raise ShapeError("one label per logit row required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    logp = log_softmax(logits, num)
    rows = -logp[np.arange(len(labels)), labels]
    loss = float(num.finalize(num.total(rows[:, None]))[0]) / len(labels)
    return loss, np.exp(logp)


def softmax_xent_backward(probs: np.ndarray, labels: np.ndarray, denom: int | None = None) -> np.ndarray:
    n = len(labels) if denom is None else denom
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / n


# --------------------------------------------------------------------------
# tape primitives


def linear(tape: Tape, x: Var, w: Var, b: Var | None = None) -> Var:
    _no_param(x)
    num = tape.numerics
    out = linear_forward(x.value, w.value, None if b is None else b.value, num)

    def back(g):
        gx, gw, gb = linear_backward(g, x.value, w.value, b is not None, num, x.needs_grad, w.needs_grad)
        return (gx, gw) if b is None else (gx, gw, gb)

    ins = (x, w) if b is None else (x, w, b)
    return tape.record("linear", out, ins, back)


def relu(tape: Tape, x: Var) -> Var:
    _no_param(x)
    mask = x.value > 0.0  # derivative at exactly 0 is 0
    return tape.record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(tape: Tape, x: Var, slope: float = 0.2) -> Var:
    _no_param(x)
    d = np.where(x.value > 0.0, 1.0, slope)
    return tape.record("leaky_relu", x.value * d, (x,), lambda g: (g * d,))


def tanh(tape: Tape, x: Var) -> Var:
    _no_param(x)
    y = np.tanh(x.value)
    return tape.record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(tape: Tape, x: Var) -> Var:
    _no_param(x)
    y = np.exp(x.value)
    return tape.record("exp", y, (x,), lambda g: (g * y,))


def identity(tape: Tape, x: Var) -> Var:
    return x


def add(tape: Tape, a: Var, b: Var) -> Var:
    _no_param(a, b)
    _same_shape(a, b, "add")
    return tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(tape: Tape, a: Var, b: Var) -> Var:
    _no_param(a, b)
    _same_shape(a, b, "sub")
    return tape.record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(tape: Tape, a: Var, b: Var) -> Var:
    _no_param(a, b)
    _same_shape(a, b, "mul")
    return tape.record("mul", a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(tape: Tape, x: Var, c: float) -> Var:
    _no_param(x)
    c = float(c)
    return tape.record("scale", x.value * c, (x,), lambda g: (g * c,))


def row_scale(tape: Tape, x: Var, w: Var) -> Var:
    """Scale row ``i`` of ``x`` by ``w[i, 0]``."""
    _no_param(x, w)
    if w.value.shape != (x.value.shape[0], 1):
        raise ShapeError(f"row_scale: weights {w.value.shape} for rows {x.value.shape[0]}")
    num = tape.numerics

    def back(g):
        return g * w.value, num.rowsum(g * x.value)[:, None]

    return tape.record("row_scale", x.value * w.value, (x, w), back)


def concat(tape: Tape, parts: Sequence[Var]) -> Var:
    _no_param(*parts)
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError("concat: row counts differ")
    widths = [p.value.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.value for p in parts], axis=1)
    return tape.record("concat", out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=1)))


def dropout(tape: Tape, x: Var, mask: np.ndarray | None, keep_prob: float) -> Var:
    """Inverted dropout with an externally drawn boolean ``mask``."""
    if mask is None or keep_prob >= 1.0:
        return x
    _no_param(x)
    factor = mask.astype(np.float64) / keep_prob
    if factor.shape != x.value.shape:
        raise ShapeError("dropout mask shape mismatch")
    return tape.record("dropout", x.value * factor, (x,), lambda g: (g * factor,))


def total(tape: Tape, x: Var) -> Var:
    """Sum of all entries as a 1x1 tensor (reproducible under exact numerics)."""
    _no_param(x)
    num = tape.numerics
    flat = x.value.reshape(-1, 1)
    val = num.finalize(num.total(flat)).reshape(1, 1)
    shape = x.value.shape
    return tape.record("total", val, (x,), lambda g: (np.full(shape, g[0, 0]),))


def softmax_xent(tape: Tape, logits: Var, labels: np.ndarray, denom: int | None = None) -> Var:
    """Per-row cross-entropy divided by ``denom`` (default: row count), shape (n, 1)."""
    _no_param(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels) if denom is None else denom
    if len(labels) == 0:
        raise ValueError("softmax cross-entropy over an empty label set")
    logp = log_softmax(logits.value, tape.numerics)
    rows = -logp[np.arange(len(labels)), labels][:, None] / n
    probs = np.exp(logp)

    def back(g):
        return (softmax_xent_backward(probs, labels, n) * g,)

    return tape.record("softmax_xent", rows, (logits,), back)


ACTIVATIONS: Mapping[str, Callable[[Tape, Var], Var]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": identity,
    "linear": identity,
    "leaky_relu": leaky_relu,
    "exp": exp,
}


def activation(name: str) -> Callable[[Tape, Var], Var]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def grad_check(
    f: Callable[..., Var],
    inputs: Mapping[str, np.ndarray],
    params: Sequence[Param] = (),
    eps: float = 1e-6,
    tol: float = 1e-6,
    name: str = "grad_check",
    seed: int = 0,
    backward: Callable | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f(tape, **vars)`` returns a Var; non-scalar outputs are contracted with
    a fixed random cotangent.  ``backward`` optionally overrides how the
    analytic gradient is computed (``backward(tape, out, cotangent)``), which
    is how the harness is self-tested with a corrupted derivative.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def run(vals: Mapping[str, np.ndarray], pvals: Mapping[str, np.ndarray] | None = None):
        saved = {}
        if pvals:
            for p in params:
                saved[p.name] = p.value
                p.value = pvals[p.name]
        try:
            tape = Tape()
            vs = {k: tape.leaf(v) for k, v in vals.items()}
            out = f(tape, **vs)
        finally:
            for p in params:
                if p.name in saved:
                    p.value = saved[p.name]
        return tape, vs, out

    tape, vs, out = run(inputs)
    cot = rng.standard_normal(out.value.shape)
    if backward is None:
        tape.backward([(out, cot)])
    else:
        backward(tape, out, cot)
    analytic = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vs.items()}
    pg = tape.param_grads()
    for p in params:
        g = pg.get(p.name)
        analytic["param:" + p.name] = np.zeros_like(p.value) if g is None else tape.numerics.finalize(g)

    def scalar(vals, pvals=None) -> float:
        _, _, o = run(vals, pvals)
        return float(np.sum(o.value * cot))

    errors = {}
    for k, x in inputs.items():
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = dict(inputs), dict(inputs)
            xp[k] = x.copy(); xp[k][idx] += eps
            xm[k] = x.copy(); xm[k][idx] -= eps
            fd[idx] = (scalar(xp) - scalar(xm)) / (2 * eps)
        errors[k] = rel_error(analytic[k], fd)
    base = {p.name: p.value for p in params}
    for p in params:
        fd = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            pp, pm = dict(base), dict(base)
            pp[p.name] = p.value.copy(); pp[p.name][idx] += eps
            pm[p.name] = p.value.copy(); pm[p.name][idx] -= eps
            fd[idx] = (scalar(inputs, pp) - scalar(inputs, pm)) / (2 * eps)
        errors["param:" + p.name] = rel_error(analytic["param:" + p.name], fd)
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(name, worst, tol, errors)
