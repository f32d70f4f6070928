import numpy as np
import pytest

from gpatcher import kernels
from gpatcher.graph import normalize_adjacency

from conftest import er_graph

BACKENDS = kernels.available_backends()
PY = kernels.get_backend("python")


def test_compiled_backend_builds():
    # the extension is part of the install; the fallback is for broken builds
    assert "cython" in BACKENDS
    assert kernels.BACKEND in ("cython", "python")


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_round_robin_covers_all_pairs():
    for n in (1, 2, 5, 8):
        pairs = {(int(a), int(b)) for p, q in PY.round_robin(n) for a, b in zip(p, q)}
        assert pairs == {(i, j) for i in range(n) for j in range(i + 1, n)}


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("n", [1, 2, 7, 30])
def test_jacobi_backend(name, n):
    rng = np.random.default_rng(n)
    a = rng.normal(size=(n, n))
    a = a + a.T
    w, V, sweeps, off = kernels.get_backend(name).jacobi_eigh(a, 1e-12, 100)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-11)
    np.testing.assert_allclose((V * w) @ V.T, a, atol=1e-11)
    np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-12)


def test_jacobi_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend unavailable")
    a = normalize_adjacency(er_graph(25, 0.3, 2)).dense()
    wc, Vc, sc, _ = kernels.get_backend("cython").jacobi_eigh(a, 1e-12, 100)
    wp, Vp, sp_, _ = PY.jacobi_eigh(a, 1e-12, 100)
    assert sc == sp_
    np.testing.assert_allclose(wc, wp, atol=1e-13)
    np.testing.assert_allclose(Vc, Vp, atol=1e-11)


@pytest.mark.parametrize("name", BACKENDS)
def test_topp_columns_oracle(name):
    rng = np.random.default_rng(6)
    keys = rng.integers(0, 4, size=(6, 6)).astype(float)
    idx, counts = kernels.get_backend(name).topp_columns(keys, 3)
    for v in range(6):
        expect = sorted(range(6), key=lambda u: (-keys[u, v], u))[:3]
        assert idx[v].tolist() == expect
    assert np.all(counts == 3)
    idx, counts = kernels.get_backend(name).topp_columns(keys, 8)
    assert np.all(idx[:, 6:] == -1) and np.all(counts == 6)


def _csr(g):
    m = normalize_adjacency(g)
    return m, m.csr_arrays()


@pytest.mark.parametrize("name", BACKENDS)
def test_ppr_dense_backend(name):
    m, arr = _csr(er_graph(30, 0.2, 1))
    R, steps, resid = kernels.get_backend(name).ppr_dense(*arr, 30, 0.5, 1e-10, 1000)
    exact = np.linalg.solve(np.eye(30) - 0.5 * m.dense(), 0.5 * np.eye(30))
    np.testing.assert_allclose(R, exact, atol=1e-9)
    assert np.all(resid < 1e-10)


def test_ppr_backends_bitwise_exact_path():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend unavailable")
    m, arr = _csr(er_graph(60, 0.1, 4))
    C, P = kernels.get_backend("cython"), PY
    out_c = C.ppr_topp(*arr, 60, 0.5, 1e-8, 1000, 0.0, 8, 1e12)
    out_p = P.ppr_topp(*arr, 60, 0.5, 1e-8, 1000, 0.0, 8, 1e12)
    np.testing.assert_array_equal(out_c[0], out_p[0])
    np.testing.assert_allclose(out_c[1], out_p[1], atol=1e-14)
    np.testing.assert_array_equal(out_c[3], out_p[3])
    Rc = C.ppr_dense(*arr, 60, 0.5, 1e-8, 1000)
    Rp = P.ppr_dense(*arr, 60, 0.5, 1e-8, 1000)
    np.testing.assert_allclose(Rc[0], Rp[0], atol=1e-14)
    np.testing.assert_array_equal(Rc[1], Rp[1])


@pytest.mark.parametrize("name", BACKENDS)
def test_ppr_topp_dropped_terms_still_counted(name):
    m, arr = _csr(er_graph(200, 0.05, 8))
    exact = kernels.get_backend(name).ppr_topp(*arr, 200, 0.5, 1e-8, 1000, 0.0, 16, 1e12)
    approx = kernels.get_backend(name).ppr_topp(*arr, 200, 0.5, 1e-8, 1000, 1e-4, 16, 1e12)
    # every accumulated score is a partial sum of the exact one
    assert np.all(approx[1] <= exact[1].max(axis=1, keepdims=True) + 1e-15)
    assert np.all(approx[3] <= exact[3])
    overlap = np.mean([len(set(a) & set(b)) / 16 for a, b in zip(approx[0], exact[0])])
    assert overlap > 0.95


def test_ppr_drop_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend unavailable")
    m, arr = _csr(er_graph(300, 0.03, 11))
    a = kernels.get_backend("cython").ppr_topp(*arr, 300, 0.5, 1e-8, 1000, 1e-4, 8, 1e12)
    b = PY.ppr_topp(*arr, 300, 0.5, 1e-8, 1000, 1e-4, 8, 1e12)
    np.testing.assert_array_equal(a[3], b[3])
    np.testing.assert_allclose(a[1], b[1], atol=1e-13)
    np.testing.assert_array_equal(a[0], b[0])


@pytest.mark.parametrize("name", BACKENDS)
def test_layer_norm_backend(name):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(7, 5))
    scale, shift = rng.normal(size=5), rng.normal(size=5)
    mask = np.array([1, 1, 0, 1, 0, 1, 1], bool)
    K = kernels.get_backend(name)
    y, xhat, rstd = K.layer_norm(x, scale, shift, 1e-5, mask)
    mu = x.mean(1, keepdims=True)
    ref = (x - mu) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * scale + shift
    np.testing.assert_allclose(y[mask], ref[mask], atol=1e-12)
    assert np.all(y[~mask] == 0.0)
    dy = rng.normal(size=(7, 5))
    dx, dscale, dshift = K.layer_norm_backward(dy, xhat, rstd, scale, mask)
    assert np.all(dx[~mask] == 0.0)
    # finite-difference check of dx on a valid row
    h = 1e-6
    for j in range(5):
        xp, xm = x.copy(), x.copy()
        xp[0, j] += h
        xm[0, j] -= h
        fp = (K.layer_norm(xp, scale, shift, 1e-5, mask)[0] * dy).sum()
        fm = (K.layer_norm(xm, scale, shift, 1e-5, mask)[0] * dy).sum()
        assert dx[0, j] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)
    np.testing.assert_allclose(dshift, dy[mask].sum(0), atol=1e-12)
    np.testing.assert_allclose(dscale, (dy * xhat)[mask].sum(0), atol=1e-12)


def test_layer_norm_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend unavailable")
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40, 9))
    s, b = rng.normal(size=9), rng.normal(size=9)
    yc = kernels.get_backend("cython").layer_norm(x, s, b, 1e-5)
    yp = PY.layer_norm(x, s, b, 1e-5)
    for u, v in zip(yc, yp):
        np.testing.assert_allclose(u, np.asarray(v).reshape(np.shape(u)), atol=1e-13)
    dy = rng.normal(size=(40, 9))
    gc = kernels.get_backend("cython").layer_norm_backward(dy, yc[1], yc[2], s)
    gp = PY.layer_norm_backward(dy, yp[1], yp[2], s)
    for u, v in zip(gc, gp):
        np.testing.assert_allclose(u, v, atol=1e-12)


def test_pure_python_fallback_selected_by_env():
    import os
    import subprocess
    import sys
    env = dict(os.environ, GPATCHER_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c",
                          "from gpatcher import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
