"""Randomized checks of the spectral bounds.

Each trial draws a random graph, labels and filter, evaluates the
average-response lower bound, and compares the error-bound term against
a straight-loop reference implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBound, EmptyIndexSet
from .graph import Graph, node_heterophily, normalize_adjacency
from .spectral import (FilterSpec, eigendecompose, frequency_response, lemma1_bound,
                       spectral_heterophily, spectrum_of, theorem1_bound_term)

TRIAL_FIELDS = ("trial", "family", "n", "status", "lhs", "rhs", "proof_holds",
                "excluded", "theorem_term", "theorem_reference", "theorem_match")


@dataclass
class VerifyReport:
    passed: int = 0
    failed: int = 0
    degenerate: int = 0
    proof_passed: int = 0
    theorem_checked: int = 0
    theorem_mismatch: int = 0
    theorem_skipped: int = 0
    rows: list = field(default_factory=list)

    @property
    def ok(self):
        return self.failed == 0 and self.theorem_mismatch == 0

    def summary_lines(self):
        return [f"lemma: {self.passed} passed, {self.degenerate} degenerate-skipped, "
                f"{self.failed} failed",
                f"lemma proof step: {self.proof_passed} of {self.passed + self.failed} hold",
                f"theorem term: {self.theorem_checked} checked, {self.theorem_mismatch} mismatched, "
                f"{self.theorem_skipped} skipped"]


def theorem_term_reference(g, delta, eta, hh, eps=1e-12):
    """Loop-by-loop evaluation of the error-bound term (oracle)."""
    n = len(g)
    m_g = math.inf
    S = 0.0
    W = 0.0
    L = 0.0
    used = 0
    for i in range(n):
        if delta[i] == 0.0 or abs(hh[i]) < eps or eta[i] == 0.0:
            continue
        used += 1
        S += g[i]
        W += g[i] * abs(hh[i])
        L += math.log(abs(hh[i]))
        if g[i] != 0.0:
            b = abs(1.0 / (g[i] * delta[i]))
            e = min(max(eta[i], -b), b)
            m_g = min(m_g, e * delta[i])
    if used == 0 or m_g == math.inf:
        return None
    return -m_g * L / (2 * n * math.log(W) - 2 * n * math.log(S))


def _random_graph(rng, n, C):
    for _ in range(20):
        prob = min(1.0, max(0.15, 3.0 / max(n - 1, 1)))
        A = np.triu(rng.random((n, n)) < prob, 1)
        edges = np.argwhere(A)
        labels = rng.integers(0, C, size=n)
        g = Graph.from_edges(n, edges, labels=labels, num_classes=C, warn=False)
        if n > 1 and g.degree.min() > 0:
            return g
    return None


def _random_filter(rng, K=6):
    family = ("adaptive", "heat", "bandpass", "shared", "ppr")[rng.integers(5)]
    if family == "adaptive":
        return FilterSpec("adaptive", K, weights=tuple(rng.normal(size=K)))
    if family == "heat":
        return FilterSpec("heat", K, weights=tuple(rng.random(K)), t0=float(rng.uniform(-2, 2)))
    if family == "bandpass":
        return FilterSpec("bandpass", K, weights=tuple(rng.random(K)))
    if family == "shared":
        return FilterSpec("shared", K, weights=(float(rng.normal()),))
    return FilterSpec("ppr", K, c=float(rng.uniform(0.05, 0.95)))


def _to_unit_range(r):
    """Map a response into [0, 2] by an affine rescale."""
    lo, hi = r.min(), r.max()
    if hi - lo < 1e-15:
        return np.ones_like(r)
    return 2.0 * (r - lo) / (hi - lo)


def run_trials(trials=100, n=30, seed=0, C=3):
    rep = VerifyReport()
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        spec = _random_filter(rng)
        row = {"trial": t, "family": spec.family, "n": n}
        g = _random_graph(rng, n, C)
        if g is None:
            rep.degenerate += 1
            rep.theorem_skipped += 1
            row.update(status="degenerate")
            rep.rows.append(row)
            continue
        s = eigendecompose(normalize_adjacency(g))
        hh = spectral_heterophily(node_heterophily(g), s)
        gval = _to_unit_range(frequency_response(spec, s.lambdas).values)
        try:
            res = lemma1_bound(gval, hh)
        except DegenerateBound:
            rep.degenerate += 1
            row.update(status="degenerate")
        else:
            rep.passed += res.holds
            rep.failed += not res.holds
            rep.proof_passed += res.proof_holds
            row.update(status="pass" if res.holds else "fail", lhs=res.lhs, rhs=res.rhs,
                       proof_holds=res.proof_holds, excluded=res.excluded)
        # error-bound term on a binary labelling of the same graph
        y = (g.labels % 2).astype(np.float64)
        x = rng.normal(size=n)
        delta = spectrum_of(s, y - y.mean())
        eta = spectrum_of(s, x - y)
        g1 = _to_unit_range(frequency_response(spec, 1.0 - s.lambdas).values)
        try:
            term = theorem1_bound_term(g1, delta, eta, hh).value
        except (EmptyIndexSet, DegenerateBound):
            rep.theorem_skipped += 1
        else:
            ref = theorem_term_reference(g1, delta, eta, hh.values)
            match = ref is not None and math.isclose(term, ref, rel_tol=1e-9, abs_tol=1e-12)
            rep.theorem_checked += 1
            rep.theorem_mismatch += not match
            row.update(theorem_term=term, theorem_reference=ref, theorem_match=match)
        rep.rows.append(row)
    return rep
