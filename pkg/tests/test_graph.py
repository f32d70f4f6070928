import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpatcher.graph import (Graph, induce_graph, node_heterophily, normalize_adjacency,
                            permute_nodes)
from gpatcher.patcher import PatchSet, ppr_patches, score_ppr_closed, top_p_select

from conftest import er_graph, path_graph


def test_single_edge_normalized():
    m = normalize_adjacency(Graph.from_edges(2, [(0, 1)]))
    np.testing.assert_array_equal(m.dense(), [[0.0, 1.0], [1.0, 0.0]])


def test_triangle_normalized():
    A = normalize_adjacency(Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])).dense()
    off = A[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 0.5, rtol=0, atol=1e-15)
    assert np.all(np.diag(A) == 0.0)


def test_path3_hand_computed():
    # degrees (1, 2, 1): entry (0,1) = 1/sqrt(1*2)
    A = normalize_adjacency(path_graph(3)).dense()
    assert A[0, 1] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-15)
    assert A[0, 2] == 0.0


def test_self_loops_flag():
    g = path_graph(3)
    m = normalize_adjacency(g, self_loops=True)
    deg = np.array([2.0, 3.0, 2.0])
    A = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], float)
    np.testing.assert_allclose(m.dense(), A / np.sqrt(np.outer(deg, deg)), atol=1e-15)
    assert m.self_loops


def test_isolated_rows_zero():
    g = Graph.from_edges(4, [(0, 1)])
    A = normalize_adjacency(g).dense()
    assert np.all(A[2] == 0) and np.all(A[:, 3] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 0.9), st.integers(0, 10_000))
def test_normalized_bitwise_symmetric(n, prob, seed):
    A = normalize_adjacency(er_graph(n, prob, seed)).dense()
    assert np.array_equal(A, A.T)


def test_dedup_and_self_edges_dropped(caplog):
    g = Graph.from_edges(3, [(0, 1), (1, 0), (2, 2), (1, 2)])
    assert g.num_edges == 2
    assert "dropped 1 self-edges and 1 duplicate" in caplog.text


def test_graph_validation():
    with pytest.raises(ValueError):
        Graph.from_edges(3, [(0, 3)])
    with pytest.raises(ValueError):
        Graph.from_edges(3, [], labels=[0, 1, 2], num_classes=2)
    with pytest.raises(ValueError):
        Graph.from_edges(3, [], features=np.zeros((2, 1)))
    with pytest.raises(ValueError):
        Graph.from_edges(3, [], masks={"train": [0, 1], "val": [1]})


def test_graph_arrays_immutable():
    g = path_graph(3)
    with pytest.raises(ValueError):
        g.edges[0, 0] = 2


def test_heterophily_direct_count():
    # node 0 labelled 0 with neighbour labels [1, 1, 0]
    g = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)], labels=[0, 1, 1, 0])
    assert node_heterophily(g).values[0] == pytest.approx(2 / 3)


def test_heterophily_homophily_limit():
    h = node_heterophily(er_graph(30, 0.3, 0, C=1))
    assert np.all(h.values[h.defined] == 0.0) and h.graph_level == 0.0


def test_heterophily_isolated_undefined():
    g = Graph.from_edges(3, [(0, 1)], labels=[0, 1, 0])
    h = node_heterophily(g)
    assert np.isnan(h.values[2])
    assert h.graph_level == 1.0
    assert np.all(h.filled() == [1.0, 1.0, 0.0])


def test_heterophily_all_crossing_is_one():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    a, b = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    edges = [(u, v) for u in a for v in b if rng.random() < 0.3]
    edges += [(u, b[0]) for u in a] + [(a[0], v) for v in b]
    g = Graph.from_edges(40, edges, labels=labels)
    assert node_heterophily(g).graph_level == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000))
def test_heterophily_permutation_equivariant(n, seed):
    g = er_graph(n, 0.3, seed, C=3)
    perm = np.random.default_rng(seed).permutation(n)
    h = node_heterophily(g).values
    hp = node_heterophily(permute_nodes(g, perm)).values
    expect = np.empty_like(h)
    expect[perm] = h
    np.testing.assert_array_equal(hp, expect)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000))
def test_heterophily_bounds_and_mean(n, seed):
    h = node_heterophily(er_graph(n, 0.2, seed, C=3))
    v = h.values[h.defined]
    assert np.all((v >= 0) & (v <= 1))
    if v.size:
        assert h.graph_level == pytest.approx(v.mean())


def test_induce_self_only_is_edgeless():
    g = path_graph(5)
    ps = PatchSet(np.arange(5)[:, None], np.ones((5, 1), bool))
    assert induce_graph(g, ps).num_edges == 0


def test_induce_full_patches_complete():
    g = path_graph(5)
    ps = top_p_select(np.ones((5, 5)), 5)
    assert induce_graph(g, ps).num_edges == 10


def test_induce_path_ppr_matches_dense_top2():
    g = path_graph(4)
    m = normalize_adjacency(g)
    R = score_ppr_closed(m, 0.5).R
    expect = set()
    for v in range(4):
        order = sorted(range(4), key=lambda u: (-round(R[u, v], 12), u))[:2]
        expect |= {tuple(sorted((v, u))) for u in order if u != v}
    gi = induce_graph(g, ppr_patches(m, 2, c=0.5))
    assert {tuple(e) for e in gi.edges.tolist()} == expect
    np.testing.assert_array_equal(gi.labels, g.labels)


def test_digest_changes_with_content():
    a, b = path_graph(4), path_graph(5)
    assert a.digest() == path_graph(4).digest()
    assert a.digest() != b.digest()
