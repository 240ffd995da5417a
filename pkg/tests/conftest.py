import hypothesis
import numpy as np
import pytest

from umseg.graphs import WeightedGraph

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile("ci")


def random_connected_graph(rng: np.random.Generator, n: int) -> WeightedGraph:
    """Random spanning tree plus extra edges; weights uniform in (0, 1)."""
    edges = set()
    order = rng.permutation(n)
    for i in range(1, n):
        a, b = order[i], order[rng.integers(i)]
        edges.add((min(a, b), max(a, b)))
    extra = rng.integers(0, n)
    while len(edges) < n - 1 + extra:
        a, b = rng.integers(0, n, 2)
        if a != b:
            edges.add((min(a, b), max(a, b)))
    pairs = sorted(edges)
    u = np.array([p[0] for p in pairs], dtype=np.int64)
    v = np.array([p[1] for p in pairs], dtype=np.int64)
    w = rng.random(len(pairs))
    return WeightedGraph(n, u, v, w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
