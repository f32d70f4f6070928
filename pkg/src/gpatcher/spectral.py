"""Eigendecomposition, filter frequency responses and the heterophily bounds."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .errors import DegenerateBound, DimensionTooLarge, EmptyIndexSet, InvalidBand
from .graph import HeterophilyVector, NormalizedAdjacency

DENSE_LIMIT = 4000
# above this size "auto" hands the decomposition to LAPACK
JACOBI_LIMIT = 600
LOG_EPS = 1e-12

FAMILIES = ("adaptive", "heat", "bandpass", "shared", "ppr")


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Ascending eigenvalues and matching orthonormal eigenvector columns."""

    lambdas: np.ndarray
    U: np.ndarray
    source: str = "adjacency"
    method: str = "jacobi"
    sweeps: int = 0

    @property
    def n(self):
        return len(self.lambdas)

    def reconstruct(self):
        return (self.U * self.lambdas) @ self.U.T


def _fix_signs(U):
    """Make the largest-magnitude entry of every column positive.

    Entries within a relative 1e-9 of the column maximum count as tied; the
    lowest such index decides.
    """
    absU = np.abs(U)
    amax = absU.max(axis=0, initial=0.0)
    lead = np.argmax(absU >= amax * (1.0 - 1e-9), axis=0)
    signs = np.where(U[lead, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs


def eigendecompose(m, method="auto", dense_limit=DENSE_LIMIT, laplacian=False,
                   rel_tol=1e-12, max_sweeps=100) -> SpectralDecomposition:
    """Dense symmetric eigendecomposition of a normalized adjacency.

    ``method`` is "jacobi" (cyclic Jacobi rotations, compiled when
    available), "lapack" (``numpy.linalg.eigh``) or "auto", which uses
    Jacobi up to ``JACOBI_LIMIT`` nodes. With ``laplacian=True`` the matrix
    ``I - A`` is decomposed instead.
    """
    M = m.dense() if isinstance(m, NormalizedAdjacency) else np.asarray(m, dtype=np.float64)
    n = M.shape[0]
    if n > dense_limit:
        raise DimensionTooLarge(f"n={n} exceeds the dense limit {dense_limit}")
    # symmetrize from the upper triangle so the solver sees an exactly symmetric input
    upper = np.triu(M)
    M = upper + np.triu(M, 1).T
    if laplacian:
        M = np.eye(n) - M
    if method == "auto":
        method = "jacobi" if n <= JACOBI_LIMIT else "lapack"
    sweeps = 0
    if method == "jacobi":
        w, V, sweeps, _ = kernels.jacobi_eigh(M, rel_tol, max_sweeps)
    elif method == "lapack":
        w, V = np.linalg.eigh(M)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(w, kind="stable")
    lam = np.ascontiguousarray(w[order])
    U = _fix_signs(np.ascontiguousarray(V[:, order]))
    return SpectralDecomposition(lam, U, "laplacian" if laplacian else "adjacency",
                                 method, int(sweeps))


@dataclass(frozen=True, eq=False)
class SpectralHeterophily:
    values: np.ndarray

    @property
    def magnitude(self):
        return np.abs(self.values)


def spectral_heterophily(h: HeterophilyVector | np.ndarray, s: SpectralDecomposition):
    """Heterophily vector expressed in the eigenbasis (row vector times U).

    Undefined entries of isolated nodes count as zero.
    """
    H = h.filled(0.0) if isinstance(h, HeterophilyVector) else np.nan_to_num(np.asarray(h, float))
    if H.shape[0] != s.n:
        raise ValueError("heterophily vector and decomposition disagree on n")
    return SpectralHeterophily(H @ s.U)


@dataclass(frozen=True)
class FilterSpec:
    """One patch-extractor family and its parameters.

    ``weights`` holds one scalar per filter order by default; a tuple of
    length-n tuples gives per-eigenvalue weights for the adaptive family.
    ``k0`` is the first power in the polynomial sum (1, or 0 to include
    the identity term).
    """

    family: str = "adaptive"
    K: int = 10
    weights: tuple | None = None
    sigma: str = "none"
    t0: float = 1.0
    bands: tuple | None = None
    c: float = 0.5
    k0: int = 1
    tol: float = 1e-8
    max_steps: int = 1000
    drop_tol: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown filter family {self.family!r}")
        if self.k0 not in (0, 1):
            raise ValueError("k0 must be 0 or 1")
        if self.K < self.k0 or (self.K < 1 and self.family not in ("adaptive", "ppr")):
            raise ValueError("K must be >= 1 (>= 0 when the sum starts at k0=0)")
        if self.sigma not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.sigma!r}")
        if self.family == "ppr" and not 0.0 < self.c < 1.0:
            raise ValueError("ppr needs 0 < c < 1")
        if self.bands is not None:
            for lo, hi in self.bands:
                if lo >= hi:
                    raise InvalidBand(f"band lower edge {lo} >= upper edge {hi}")

    @classmethod
    def geometric(cls, c, K, k0=1, **kw):
        """Adaptive filter with PPR-style weights (1-c) c^k, k = k0..K."""
        w = tuple((1.0 - c) * c ** k for k in range(k0, K + 1))
        kw.setdefault("label", f"geometric(c={c:g})")
        return cls(family="adaptive", K=K, weights=w, k0=k0, **kw)

    @property
    def orders(self):
        return np.arange(self.k0, self.K + 1)

    def weight_array(self, n=None):
        if self.weights is None:
            return np.ones(len(self.orders))
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape[0] != len(self.orders):
            raise ValueError(f"expected {len(self.orders)} weight rows, got {w.shape[0]}")
        if w.ndim == 2 and n is not None and w.shape[1] != n:
            raise ValueError(f"per-eigenvalue weights need length {n}")
        return w

    def band_edges(self):
        if self.bands is not None:
            return np.asarray(self.bands, dtype=np.float64).reshape(-1, 2)
        edges = np.linspace(-1.0, 1.0, self.K + 1)
        return np.stack([edges[:-1], edges[1:]], axis=1)

    def to_dict(self):
        d = asdict(self)
        if d["weights"] is not None:
            d["weights"] = np.asarray(d["weights"]).tolist()
        if d["bands"] is not None:
            d["bands"] = [list(b) for b in d["bands"]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("weights") is not None:
            w = d["weights"]
            d["weights"] = tuple(tuple(r) if isinstance(r, list) else r for r in w)
        if d.get("bands") is not None:
            d["bands"] = tuple(tuple(b) for b in d["bands"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FrequencyResponse:
    values: np.ndarray
    spec: FilterSpec = field(default_factory=FilterSpec)

    @property
    def mean(self):
        return float(self.values.mean())


def _act(x, sigma):
    return np.maximum(x, 0.0) if sigma == "relu" else x


def frequency_response(spec: FilterSpec, lambdas, sigma=None) -> FrequencyResponse:
    """Evaluate ``g(lambda)`` for a filter family.

    ``sigma`` overrides ``spec.sigma``; the nonlinearity is applied to each
    summand before summing.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    sigma = spec.sigma if sigma is None else sigma
    fam = spec.family
    if fam in ("adaptive", "shared"):
        if fam == "shared":
            w1 = 1.0 if spec.weights is None else float(np.ravel(spec.weights)[0])
            w = np.full(len(spec.orders), w1)
        else:
            w = spec.weight_array(len(lam))
        powers = lam[None, :] ** spec.orders[:, None]
        terms = (w[:, None] if w.ndim == 1 else w) * powers
    elif fam == "heat":
        w = spec.weight_array()
        t = spec.t0 * spec.orders
        terms = w[:, None] * np.exp(-t[:, None] * lam[None, :])
    elif fam == "bandpass":
        edges = spec.band_edges()
        w = np.ones(len(edges)) if spec.weights is None else np.asarray(spec.weights, float)
        if len(w) != len(edges):
            raise ValueError("bandpass needs one weight per band")
        lc = np.clip(lam, -1.0, 1.0)
        lo, hi = edges[:, :1], edges[:, 1:]
        inside = (lc[None, :] >= lo) & ((lc[None, :] < hi) | ((hi >= 1.0) & (lc[None, :] <= hi)))
        terms = w[:, None] * inside
    else:  # ppr: truncated geometric series, orders 0..K
        k = np.arange(0, spec.K + 1)
        terms = (1.0 - spec.c) * (spec.c ** k)[:, None] * lam[None, :] ** k[:, None]
    values = _act(terms, sigma).sum(axis=0)
    return FrequencyResponse(values, spec)


@dataclass(frozen=True)
class Lemma1Result:
    """Both sides of the average-response lower bound.

    ``proof_lhs >= proof_rhs`` is the weighted AM-GM consequence the
    bound is derived from: ``S log(sum g|H|/S) >= sum log|H|``.
    """

    lhs: float
    rhs: float
    holds: bool
    excluded: int
    denominator: float
    proof_lhs: float
    proof_rhs: float

    @property
    def proof_holds(self):
        return self.proof_lhs >= self.proof_rhs - 1e-9


def lemma1_bound(g, hh, eps=LOG_EPS) -> Lemma1Result:
    """Evaluate the lower bound on the mean frequency response.

    Indices with ``|H_i| < eps`` are dropped from every sum on the
    right-hand side; the left-hand side averages all n responses.
    """
    gv = np.asarray(g.values if isinstance(g, FrequencyResponse) else g, dtype=np.float64)
    Hm = np.abs(hh.values if isinstance(hh, SpectralHeterophily) else np.asarray(hh, float))
    n = gv.shape[0]
    if Hm.shape[0] != n:
        raise ValueError("response and spectral heterophily disagree on n")
    if np.any(gv < 0.0) or np.any(gv > 2.0):
        raise ValueError("frequency responses must lie in [0, 2]")
    S_all = gv.sum()
    if S_all <= 0.0:
        raise DegenerateBound("sum of frequency responses is zero")
    keep = Hm >= eps
    excluded = int((~keep).sum())
    if not keep.any():
        raise DegenerateBound("every spectral heterophily component is below eps")
    gk, Hk = gv[keep], Hm[keep]
    S, weighted = gk.sum(), (gk * Hk).sum()
    if S <= 0.0 or weighted <= 0.0:
        raise DegenerateBound("responses vanish on the retained indices")
    log_ratio = math.log(weighted) - math.log(S)
    if abs(log_ratio) < 1e-12:
        raise DegenerateBound(f"log-ratio denominator {log_ratio:.3e} is zero")
    sum_log = float(np.log(Hk).sum())
    lhs = float(S_all / n)
    rhs = sum_log / (n * log_ratio)
    return Lemma1Result(lhs=lhs, rhs=float(rhs), holds=bool(lhs >= rhs - 1e-9),
                        excluded=excluded, denominator=float(n * log_ratio),
                        proof_lhs=float(S * log_ratio), proof_rhs=sum_log)


def clamp(x, bound=1.0):
    """Clamp to ``[-|bound|, |bound|]``; ``bound=1`` is the plain clamp."""
    b = np.abs(bound)
    return np.minimum(np.maximum(x, -b), b)


@dataclass(frozen=True)
class Theorem1Term:
    """Computable part of the error bound: ``bound = c1 + value``."""

    value: float
    min_factor: float
    n_min_set: int
    n_sum_set: int


def theorem1_bound_term(g, delta, eta, hh, eps=LOG_EPS) -> Theorem1Term:
    """Second term of the binary-classification error bound.

    ``g`` holds responses evaluated at ``1 - lambda_i``; ``delta`` and
    ``eta`` are spectra of the label and feature differences. Indices with
    ``delta_i == 0`` or ``|H_i| < eps`` are removed from every index set;
    the minimum additionally requires ``g_i != 0`` and ``eta_i != 0``.
    The unknown constant c1 is not included.
    """
    gv = np.asarray(g.values if isinstance(g, FrequencyResponse) else g, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    e = np.asarray(eta, dtype=np.float64)
    Hm = np.abs(hh.values if isinstance(hh, SpectralHeterophily) else np.asarray(hh, float))
    n = gv.shape[0]
    if not (d.shape == e.shape == Hm.shape == (n,)):
        raise ValueError("g, delta, eta and spectral heterophily must share length n")
    base = (d != 0.0) & (Hm >= eps)
    sum_set = base & (e != 0.0)
    min_set = sum_set & (gv != 0.0)
    if not min_set.any() or not sum_set.any():
        raise EmptyIndexSet("no index survives the delta/eta/heterophily restriction")
    gm, dm, em = gv[min_set], d[min_set], e[min_set]
    eta_clamped = clamp(em, 1.0 / (gm * dm))
    m_g = float(np.min(eta_clamped * dm))
    gs, Hs = gv[sum_set], Hm[sum_set]
    S, weighted = gs.sum(), (gs * Hs).sum()
    if S <= 0.0 or weighted <= 0.0:
        raise DegenerateBound("responses vanish on the summation set")
    denom = 2 * n * math.log(weighted) - 2 * n * math.log(S)
    if abs(denom) < 1e-12:
        raise DegenerateBound("log-ratio denominator is zero")
    value = -m_g * float(np.log(Hs).sum()) / denom
    return Theorem1Term(value=float(value), min_factor=m_g,
                        n_min_set=int(min_set.sum()), n_sum_set=int(sum_set.sum()))


def spectrum_of(s: SpectralDecomposition, signal):
    """Graph Fourier coefficients ``U^T x``."""
    return s.U.T @ np.asarray(signal, dtype=np.float64)


LEMMA_CSV_FIELDS = ("dataset", "family", "lhs", "rhs", "holds", "excluded")


def lemma_csv_row(dataset, family, res: Lemma1Result):
    return {"dataset": dataset, "family": family, "lhs": res.lhs, "rhs": res.rhs,
            "holds": int(res.holds), "excluded": res.excluded}
