import numpy as np
import pytest

from gpatcher.graph import Graph


def er_graph(n, prob, seed, C=2, d=3, connected=False):
    """Erdos-Renyi graph with random labels/features; optionally retried until connected."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        A = np.triu(rng.random((n, n)) < prob, 1)
        edges = np.argwhere(A)
        g = Graph.from_edges(n, edges, features=rng.normal(size=(n, d)),
                             labels=rng.integers(0, C, size=n), num_classes=C, warn=False)
        if not connected or _connected(g):
            return g
    raise RuntimeError("could not draw a connected graph")


def _connected(g):
    from scipy.sparse.csgraph import connected_components
    return connected_components(g.adjacency, directed=False)[0] == 1


def path_graph(n, **kw):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)], **kw)


def with_splits(g, seed=0, fracs=(0.6, 0.2, 0.2)):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.n)
    a = int(fracs[0] * g.n)
    b = a + int(fracs[1] * g.n)
    masks = {"train": perm[:a], "val": perm[a:b], "test": perm[b:]}
    return Graph.from_edges(g.n, g.edges, g.features, g.labels, masks,
                            num_classes=g.num_classes, warn=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
