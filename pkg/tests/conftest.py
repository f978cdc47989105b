import numpy as np
import pytest
from hypothesis import settings

from tgar.graph_store import Graph

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


def path4() -> Graph:
    """0-1-2-3, both directions."""
    src = [0, 1, 1, 2, 2, 3]
    dst = [1, 0, 2, 1, 3, 2]
    x = np.arange(8, dtype=float).reshape(4, 2)
    return Graph.from_edges(4, src, dst, None, x, None, np.array([0, 1, 0, 1]))


def two_triangles() -> Graph:
    s, d = [], []
    for base in (0, 3):
        for a, b in ((0, 1), (1, 2), (0, 2)):
            s += [base + a, base + b]
            d += [base + b, base + a]
    return Graph.from_edges(6, s, d, None, np.eye(6), None, np.array([0, 0, 0, 1, 1, 1]))


def star(leaves: int) -> Graph:
    """Center 0, leaves 1..leaves, both directions."""
    s = list(range(1, leaves + 1)) + [0] * leaves
    d = [0] * leaves + list(range(1, leaves + 1))
    x = np.arange(leaves + 1, dtype=float)[:, None] + 1.0
    return Graph.from_edges(leaves + 1, s, d, None, x)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
