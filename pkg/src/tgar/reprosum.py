"""Order-independent floating point accumulation.

Every value is cut into fixed-exponent slices ("bins"). Slices in the same bin
are integer multiples of that bin's unit, so adding them in float64 is exact
and the bin totals do not depend on summation order or on how the summands
were grouped. Merging two accumulators is therefore exact as well, which is
what lets partial sums computed on different partitions combine into results
that are bitwise identical to a single-partition run.

Capacity: |value| < 2**40 and at most 2**22 summands per output element.
The part of a value below 2**-117 is discarded (deterministically).
"""

from __future__ import annotations

import numpy as np

# Bin exponents, 32 bits apart.  Slice b is a multiple of 2**(EXP[b] - 52).
_EXPONENTS = (64, 32, 0, -32, -64)
_SPLITTERS = tuple(1.5 * 2.0**e for e in _EXPONENTS)
NBINS = len(_EXPONENTS)
LIMIT = 2.0**40


class AccumulatorOverflow(ArithmeticError):
    pass


def split(x: np.ndarray) -> np.ndarray:
    """Return the slices of ``x`` with a leading bin axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and not np.all(np.abs(x) < LIMIT):
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite value in reproducible sum")
        raise AccumulatorOverflow(f"value magnitude exceeds {LIMIT:g}")
    out = np.empty((NBINS,) + x.shape)
    r = x.copy()
    for b, c in enumerate(_SPLITTERS):
        q = (r + c) - c
        out[b] = q
        r -= q
    return out


def finalize(bins: np.ndarray) -> np.ndarray:
    """Collapse bins (leading axis) to float64, high bins first."""
    total = bins[0].copy()
    for b in range(1, NBINS):
        total += bins[b]
    return total


def total(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Reproducible ``x.sum(axis)``."""
    return finalize(split(x).sum(axis=axis + 1))


def segment_bins(values: np.ndarray, segments: np.ndarray, count: int) -> np.ndarray:
    """Binned per-segment sums of the rows of ``values``.

    Returns shape ``(NBINS, count) + values.shape[1:]``.
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((NBINS, count) + values.shape[1:])
    if len(values):
        sl = split(values)
        for b in range(NBINS):
            np.add.at(out[b], segments, sl[b])
    return out


def outer_bins(x: np.ndarray, g: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Binned ``x.T @ g`` accumulated as a sum of per-row outer products.

    Zero entries of ``x`` contribute nothing, so mostly-zero inputs (sparse
    features, ReLU outputs) only slice their nonzero products.
    """
    n, a = x.shape
    b = g.shape[1]
    out = np.zeros((NBINS, a, b))
    rows, cols = np.nonzero(x)
    if len(rows) < 0.5 * x.size:
        order = np.argsort(cols, kind="stable")
        rows, cols = rows[order], cols[order]
        for start in range(0, len(rows), chunk * 256):
            r, c = rows[start:start + chunk * 256], cols[start:start + chunk * 256]
            sl = split(x[r, c][:, None] * g[r])
            heads = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
            out[:, c[heads], :] += np.add.reduceat(sl, heads, axis=1)
        return out
    for start in range(0, n, chunk):
        prod = x[start:start + chunk, :, None] * g[start:start + chunk, None, :]
        out += split(prod).sum(axis=1)
    return out


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-reproducible ``x @ w``: each output row depends only on its input row.

    Accumulates over the contraction axis in a fixed sequential order, so
    the result for a row never depends on how many rows come with it.
    """
    x = np.asarray(x, dtype=np.float64)
    n, a = x.shape
    out = np.zeros((n, w.shape[1]))
    if n == 0:
        return out
    xt = np.ascontiguousarray(x.T)
    for j in range(a):
        out += xt[j][:, None] * w[j]
    return out
