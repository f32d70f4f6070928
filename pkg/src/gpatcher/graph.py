"""Graph container, adjacency normalization and spatial heterophily."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def canonical_edges(edges, n):
    """Return (unique u<v edge array, #self-edges dropped, #duplicates dropped)."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ValueError(f"edge endpoint out of range [0, {n})")
    loops = e[:, 0] == e[:, 1]
    e = e[~loops]
    e = np.sort(e, axis=1)
    uniq = np.unique(e, axis=0) if len(e) else e.reshape(0, 2)
    return uniq, int(loops.sum()), int(len(e) - len(uniq))


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph with node features, labels and split masks.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``,
    sorted lexicographically. Build instances through :meth:`from_edges`,
    which canonicalizes arbitrary edge lists.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    name: str = "graph"
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_edges(cls, n, edges, features=None, labels=None, masks=None,
                   num_classes=None, name="graph", meta=None, warn=True):
        n = int(n)
        if n < 1:
            raise ValueError("graph needs at least one node")
        e, loops, dups = canonical_edges(edges, n)
        if warn and (loops or dups):
            log.warning("%s: dropped %d self-edges and %d duplicate edges",
                        name, loops, dups)
        if features is None:
            features = np.zeros((n, 0))
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError(f"features must have shape ({n}, d), got {features.shape}")
        if labels is None:
            labels = np.zeros(n, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels must have length {n}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        C = int(num_classes) if num_classes is not None else int(labels.max()) + 1
        if labels.size and labels.max() >= C:
            raise ValueError(f"label {labels.max()} >= num_classes {C}")
        masks = masks or {}
        m = {}
        for key in ("train", "val", "test"):
            v = masks.get(key)
            m[key] = np.zeros(n, dtype=bool) if v is None else _as_mask(v, n)
        overlap = (m["train"].astype(int) + m["val"] + m["test"]) > 1
        if overlap.any():
            raise ValueError(f"masks overlap at {int(overlap.sum())} nodes")
        return cls(n=n, edges=_frozen(e, np.int64), features=_frozen(features, np.float64),
                   labels=_frozen(labels, np.int64), train_mask=_frozen(m["train"], bool),
                   val_mask=_frozen(m["val"], bool), test_mask=_frozen(m["test"], bool),
                   num_classes=C, name=name, meta=dict(meta or {}))

    @property
    def num_edges(self):
        """Undirected edge count."""
        return len(self.edges)

    @property
    def num_features(self):
        return self.features.shape[1]

    @cached_property
    def adjacency(self):
        """Symmetric 0/1 CSR adjacency."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))
        A.sort_indices()
        return A

    @cached_property
    def degree(self):
        d = np.bincount(self.edges.ravel(), minlength=self.n)
        d.setflags(write=False)
        return d

    def mask(self, split):
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]

    def digest(self):
        """Content hash used to key patch caches."""
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        for a in (self.edges, self.features, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def with_edges(self, edges, name=None):
        """Same nodes, features, labels and masks over a new edge set."""
        return Graph.from_edges(self.n, edges, self.features, self.labels,
                                {"train": self.train_mask, "val": self.val_mask,
                                 "test": self.test_mask},
                                num_classes=self.num_classes,
                                name=name or self.name, meta=self.meta, warn=False)


def _as_mask(v, n):
    v = np.asarray(v)
    if v.dtype == bool:
        if v.shape != (n,):
            raise ValueError(f"boolean mask must have length {n}")
        return v.copy()
    out = np.zeros(n, dtype=bool)
    idx = v.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("mask index out of range")
    out[idx] = True
    return out


def permute_nodes(g, perm):
    """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    masks = {k: g.mask(k)[inv] for k in ("train", "val", "test")}
    return Graph.from_edges(g.n, perm[g.edges], g.features[inv], g.labels[inv], masks,
                            num_classes=g.num_classes, name=g.name, warn=False)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """``D^-1/2 (A + s I) D^-1/2`` in CSR form; ``s`` is ``self_loops``."""

    matrix: sp.csr_matrix
    self_loops: bool

    @property
    def n(self):
        return self.matrix.shape[0]

    def dense(self):
        return self.matrix.toarray()

    def csr_arrays(self):
        m = self.matrix
        return (np.ascontiguousarray(m.indptr, dtype=np.int64),
                np.ascontiguousarray(m.indices, dtype=np.int64),
                np.ascontiguousarray(m.data, dtype=np.float64))


def normalize_adjacency(g: Graph, self_loops: bool = False) -> NormalizedAdjacency:
    """Symmetric degree normalization of the adjacency matrix.

    Degree-zero nodes get all-zero rows and columns. Each stored value is
    computed once per undirected edge and mirrored, so the result is
    bitwise symmetric.
    """
    n = g.n
    deg = g.degree.astype(np.float64) + (1.0 if self_loops else 0.0)
    dinv = np.zeros(n)
    nz = deg > 0
    dinv[nz] = 1.0 / np.sqrt(deg[nz])
    u, v = g.edges[:, 0], g.edges[:, 1]
    w = dinv[u] * dinv[v]
    rows, cols, vals = [u, v], [v, u], [w, w]
    if self_loops:
        idx = np.arange(n)
        rows.append(idx)
        cols.append(idx)
        vals.append(dinv * dinv)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    M.sort_indices()
    return NormalizedAdjacency(matrix=M, self_loops=bool(self_loops))


@dataclass(frozen=True, eq=False)
class HeterophilyVector:
    """Per-node heterophily; NaN marks isolated (undefined) nodes."""

    values: np.ndarray

    @property
    def defined(self):
        return ~np.isnan(self.values)

    @property
    def graph_level(self):
        d = self.defined
        return float(self.values[d].mean()) if d.any() else float("nan")

    def filled(self, fill=0.0):
        return np.where(self.defined, self.values, fill)


def node_heterophily(g: Graph) -> HeterophilyVector:
    """Fraction of each node's neighbours carrying a different label."""
    u, v = g.edges[:, 0], g.edges[:, 1]
    diff = (g.labels[u] != g.labels[v]).astype(np.float64)
    hetero = np.bincount(u, diff, minlength=g.n) + np.bincount(v, diff, minlength=g.n)
    deg = g.degree
    H = np.full(g.n, np.nan)
    nz = deg > 0
    H[nz] = hetero[nz] / deg[nz]
    return HeterophilyVector(_frozen(H, np.float64))


def induce_graph(g: Graph, patches) -> Graph:
    """Graph linking every node to each valid member of its patch."""
    rows = np.repeat(np.arange(g.n), patches.indices.shape[1])
    cols = patches.indices.ravel()
    keep = patches.valid.ravel() & (rows != cols)
    return g.with_edges(np.stack([rows[keep], cols[keep]], axis=1), name=f"{g.name}-induced")
