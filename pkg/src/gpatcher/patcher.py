"""Score matrices and top-p patch extraction.

Spectral extractors build a dense ``n x n`` score matrix from the
eigendecomposition; the PPR extractor iterates one column at a time and
keeps only the top-p entries, so it also runs far beyond the dense limit.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionTooLarge, NoConvergence
from .graph import Graph, NormalizedAdjacency, normalize_adjacency
from .spectral import (DENSE_LIMIT, FilterSpec, SpectralDecomposition, eigendecompose,
                       frequency_response)

log = logging.getLogger(__name__)

TIE_DIGITS = 12
PATCH_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Dense relevance scores; column v ranks every node for node v."""

    R: np.ndarray
    tag: str
    steps: np.ndarray | None = None
    converged: bool = True


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Ranked patch members per node.

    ``indices[v]`` lists node ids by descending score with ``-1`` at
    padding slots (``valid`` false). ``features`` gathers node features
    into an ``n x p x d`` tensor with zero rows at padding; pass
    ``tensor`` to supply that tensor explicitly instead.
    """

    indices: np.ndarray
    valid: np.ndarray
    node_features: np.ndarray | None = None
    tensor: np.ndarray | None = None
    scores: np.ndarray | None = None
    steps: np.ndarray | None = None

    @property
    def n(self):
        return self.indices.shape[0]

    @property
    def p(self):
        return self.indices.shape[1]

    @property
    def d(self):
        if self.tensor is not None:
            return self.tensor.shape[2]
        return 0 if self.node_features is None else self.node_features.shape[1]

    @property
    def features(self):
        if self.tensor is not None:
            return self.tensor
        if self.node_features is None:
            raise ValueError("patch set carries no features")
        P = self.node_features[np.where(self.valid, self.indices, 0)]
        P[~self.valid] = 0.0
        return P

    def with_features(self, features):
        return PatchSet(self.indices, self.valid, np.asarray(features, dtype=np.float64),
                        None, self.scores, self.steps)


def _rank_keys(R, tie_digits):
    """Quantize each column relative to its largest magnitude.

    Scores that agree to ``tie_digits`` significant digits compare equal and
    fall through to the node-id tie-break, which keeps rankings stable
    against rounding noise in exact mathematical ties.
    """
    if tie_digits is None:
        return R
    scale = np.abs(R).max(axis=0)
    scale[scale == 0.0] = 1.0
    return np.rint(R / scale * 10.0 ** tie_digits)


def top_p_select(r, p, features=None, tie_digits=TIE_DIGITS) -> PatchSet:
    """Per column, the ``p`` highest-scoring node ids (ties by ascending id)."""
    R = r.R if isinstance(r, ScoreMatrix) else np.asarray(r, dtype=np.float64)
    if p < 1:
        raise ValueError("patch size must be >= 1")
    if not np.all(np.isfinite(R)):
        raise ValueError("score matrix has non-finite entries")
    idx, counts = kernels.topp_columns(_rank_keys(R, tie_digits), int(p))
    valid = np.arange(p)[None, :] < counts[:, None]
    cols = np.arange(R.shape[1])[:, None]
    scores = np.where(valid, R[np.where(valid, idx, 0), cols], 0.0)
    feats = None if features is None else np.asarray(features, dtype=np.float64)
    return PatchSet(idx, valid, feats, None, scores,
                    r.steps if isinstance(r, ScoreMatrix) else None)


def score_filter(s: SpectralDecomposition, spec: FilterSpec) -> ScoreMatrix:
    """``U g(Lambda) U^T`` for any spectral family (no activation by default)."""
    g = frequency_response(spec, s.lambdas).values
    return ScoreMatrix((s.U * g) @ s.U.T, spec.family)


def score_adaptive(s: SpectralDecomposition, w, k0=1) -> ScoreMatrix:
    """Polynomial scoring matrix ``U (sum_k w_k * Lambda^k) U^T``.

    ``w`` is a sequence of K scalars or a ``K x n`` array of per-eigenvalue
    weights, for powers ``k0 .. k0+K-1``; a :class:`FilterSpec` is also
    accepted.
    """
    if isinstance(w, FilterSpec):
        spec = w
    else:
        w = np.asarray(w, dtype=np.float64)
        K = w.shape[0]
        weights = tuple(map(tuple, w)) if w.ndim == 2 else tuple(w)
        spec = FilterSpec(family="adaptive", K=k0 + K - 1, weights=weights, k0=k0)
    out = score_filter(s, spec)
    return ScoreMatrix(out.R, "adaptive")


def score_ppr_closed(m: NormalizedAdjacency, c, dense_limit=DENSE_LIMIT) -> ScoreMatrix:
    """Column v is ``(1 - c) (I - c A)^-1 e_v`` by a dense solve."""
    n = m.n
    if n > dense_limit:
        raise DimensionTooLarge(f"n={n} exceeds the dense limit {dense_limit}")
    A = m.dense()
    R = np.linalg.solve(np.eye(n) - c * A, (1.0 - c) * np.eye(n))
    return ScoreMatrix(R, "ppr-closed")


def score_ppr_iterative(m: NormalizedAdjacency, c=0.5, tol=1e-8, max_steps=1000,
                        dense_limit=DENSE_LIMIT) -> ScoreMatrix:
    """Fixed-point PPR iteration per column, starting at ``(1 - c) e_v``.

    After t steps a column equals the Neumann sum truncated at power t. Each
    column stops once its L1 update falls below ``tol``; ``steps`` records
    the per-column count.
    """
    n = m.n
    if n > dense_limit:
        raise DimensionTooLarge(f"n={n} exceeds the dense limit {dense_limit}")
    R, steps, resid = kernels.ppr_dense(*m.csr_arrays(), n, float(c), float(tol), int(max_steps))
    worst = float(resid.max()) if n else 0.0
    converged = worst < tol
    out = ScoreMatrix(R, "ppr-iterative", steps, converged)
    if not converged:
        if worst > 100 * tol:
            raise NoConvergence(f"PPR residual {worst:.3e} after {max_steps} steps", out)
        warnings.warn(f"PPR stopped at max_steps with residual {worst:.3e}", RuntimeWarning)
    return out


def neumann_ppr(A, c, K):
    """``(1 - c) sum_{k=0..K} c^k A^k`` by repeated dense products."""
    A = A.dense() if isinstance(A, NormalizedAdjacency) else np.asarray(A, dtype=np.float64)
    term = (1.0 - c) * np.eye(A.shape[0])
    total = term.copy()
    for _ in range(K):
        term = c * (A @ term)
        total += term
    return total


def fast_equals_adaptive_check(s: SpectralDecomposition, c, K, m=None) -> float:
    """Max entry gap between geometric adaptive scoring and truncated PPR.

    The adaptive side uses weights ``(1 - c) c^k`` for ``k = 0..K``; the
    PPR side sums the Neumann series of the adjacency (``m`` when given,
    otherwise the matrix reconstructed from ``s``).
    """
    weights = [(1.0 - c) * c ** k for k in range(K + 1)]
    adaptive = score_adaptive(s, weights, k0=0).R
    A = s.reconstruct() if m is None else m
    return float(np.max(np.abs(adaptive - neumann_ppr(A, c, K))))


def shuffle_patch_order(ps: PatchSet, seed) -> PatchSet:
    """Permute each row's valid entries uniformly at random."""
    rng = np.random.default_rng(seed)
    idx = ps.indices.copy()
    sc = None if ps.scores is None else ps.scores.copy()
    counts = ps.valid.sum(axis=1)
    keys = rng.random(idx.shape)
    keys[~ps.valid] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    rows = np.arange(ps.n)[:, None]
    idx = idx[rows, order]
    if sc is not None:
        sc = sc[rows, order]
    valid = np.arange(ps.p)[None, :] < counts[:, None]
    tensor = None if ps.tensor is None else ps.tensor[rows, order]
    return PatchSet(idx, valid, ps.node_features, tensor, sc, ps.steps)


def ppr_patches(m: NormalizedAdjacency, p, c=0.5, tol=1e-8, max_steps=1000, drop_tol=0.0,
                features=None, tie_digits=TIE_DIGITS) -> PatchSet:
    """Streaming PPR extraction: one column in memory at a time.

    ``drop_tol > 0`` stops propagating series terms smaller than it (they
    still count toward the score), bounding the work per column on large
    graphs at the price of exactness.
    """
    n = m.n
    tie_scale = 0.0 if tie_digits is None else 10.0 ** tie_digits
    idx, scores, counts, steps, resid = kernels.ppr_topp(
        *m.csr_arrays(), n, float(c), float(tol), int(max_steps), float(drop_tol), int(p),
        tie_scale)
    worst = float(resid.max()) if n else 0.0
    if worst >= tol:
        msg = f"PPR residual {worst:.3e} after {int(steps.max())} steps"
        if worst > 100 * tol:
            raise NoConvergence(msg)
        warnings.warn(msg, RuntimeWarning)
    valid = np.arange(p)[None, :] < counts[:, None]
    feats = None if features is None else np.asarray(features, dtype=np.float64)
    return PatchSet(idx, valid, feats, None, scores, steps)


def extract_patches(g: Graph, spec: FilterSpec, p, *, decomposition=None, self_loops=False,
                    eig_method="auto", dense_limit=DENSE_LIMIT) -> PatchSet:
    """Patches for every node of ``g`` under one extractor family."""
    m = normalize_adjacency(g, self_loops=self_loops)
    if spec.family == "ppr":
        return ppr_patches(m, p, spec.c, spec.tol, spec.max_steps, spec.drop_tol, g.features)
    s = decomposition if decomposition is not None else eigendecompose(
        m, method=eig_method, dense_limit=dense_limit)
    return top_p_select(score_filter(s, spec), p, g.features)


def cache_key(g: Graph, spec: FilterSpec, p):
    return {"graph": g.digest(), "spec": spec.to_dict(), "p": int(p)}


def save_patches(path, ps: PatchSet, key=None):
    """Write indices + validity mask (and the cache key) to an ``.npz`` file."""
    meta = {"version": PATCH_FORMAT_VERSION, "key": key}
    with open(path, "wb") as fh:
        np.savez(fh, indices=ps.indices, valid=ps.valid,
                 meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_patches(path, features=None, expect_key=None) -> PatchSet:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        indices, valid = z["indices"].astype(np.int64), z["valid"].astype(bool)
    if meta.get("version") != PATCH_FORMAT_VERSION:
        raise ValueError(f"unsupported patch file version {meta.get('version')}")
    if expect_key is not None and meta.get("key") != expect_key:
        raise ValueError("patch cache key does not match the requested graph/extractor")
    feats = None if features is None else np.asarray(features, dtype=np.float64)
    return PatchSet(indices, valid, feats)


def patch_cache_meta(path):
    with np.load(path) as z:
        return json.loads(bytes(z["meta"]).decode())


def save_patch_bundle(path, items, key=None):
    """Several labelled patch sets (e.g. search candidates) in one ``.npz``."""
    items = list(items)
    meta = {"version": PATCH_FORMAT_VERSION, "key": key, "labels": [lab for lab, _ in items]}
    arrays = {}
    for i, (_, ps) in enumerate(items):
        arrays[f"indices{i}"] = ps.indices
        arrays[f"valid{i}"] = ps.valid
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                        dtype=np.uint8), **arrays)


def load_patch_bundle(path, features=None, expect_key=None):
    """Inverse of :func:`save_patch_bundle`: list of (label, PatchSet)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != PATCH_FORMAT_VERSION:
            raise ValueError(f"unsupported patch file version {meta.get('version')}")
        if expect_key is not None and meta.get("key") != expect_key:
            raise ValueError("patch cache key does not match the requested graph/extractor")
        feats = None if features is None else np.asarray(features, dtype=np.float64)
        return [(lab, PatchSet(z[f"indices{i}"].astype(np.int64), z[f"valid{i}"].astype(bool),
                               feats)) for i, lab in enumerate(meta["labels"])]
