# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: Jacobi sweeps, per-column PPR iteration, top-p selection.

Every routine here has a numpy twin in ``_pykernels`` with the same
signature and the same arithmetic order where it matters (rotation
schedule, tie-breaking).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, rint

cnp.import_array()


cdef inline void _rotate(double[:, ::1] a, double[:, ::1] vt, Py_ssize_t p,
                         Py_ssize_t q, Py_ssize_t n) noexcept nogil:
    cdef double apq = a[p, q]
    cdef double app, aqq, theta, t, c, s, akp, akq
    cdef Py_ssize_t k
    if apq == 0.0:
        return
    app = a[p, p]
    aqq = a[q, q]
    theta = (aqq - app) / (2.0 * apq)
    if theta >= 0.0:
        t = 1.0 / (theta + sqrt(theta * theta + 1.0))
    else:
        t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
    c = 1.0 / sqrt(t * t + 1.0)
    s = t * c
    for k in range(n):
        if k == p or k == q:
            continue
        akp = a[p, k]
        akq = a[q, k]
        akp, akq = c * akp - s * akq, s * akp + c * akq
        a[p, k] = akp
        a[k, p] = akp
        a[q, k] = akq
        a[k, q] = akq
    a[p, p] = app - t * apq
    a[q, q] = aqq + t * apq
    a[p, q] = 0.0
    a[q, p] = 0.0
    for k in range(n):
        akp = vt[p, k]
        akq = vt[q, k]
        vt[p, k] = c * akp - s * akq
        vt[q, k] = s * akp + c * akq


cdef double _offnorm(double[:, ::1] a, Py_ssize_t n) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(i + 1, n):
            acc += a[i, j] * a[i, j]
    return sqrt(2.0 * acc)


def jacobi_eigh(a_in, double rel_tol=1e-12, int max_sweeps=100):
    """Cyclic Jacobi with round-robin pair ordering.

    Returns ``(diag, V, sweeps, off)`` with ``a_in ~= V diag(diag) V^T``,
    unsorted.
    """
    cdef double[:, ::1] a = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = a.shape[0]
    vt_arr = np.eye(n)
    cdef double[:, ::1] vt = vt_arr
    cdef double fro = sqrt(np.sum(np.square(np.asarray(a))))
    cdef double target = rel_tol * fro
    cdef Py_ssize_t m = n + (n % 2)
    cdef cnp.int64_t[::1] ring = np.arange(m, dtype=np.int64)
    cdef Py_ssize_t r, i, p, q, tmp, sweeps = 0
    cdef double off = _offnorm(a, n)
    with nogil:
        while off > target and sweeps < max_sweeps:
            for r in range(m - 1):
                for i in range(m // 2):
                    p = ring[i]
                    q = ring[m - 1 - i]
                    if p >= n or q >= n:
                        continue
                    if p > q:
                        p, q = q, p
                    _rotate(a, vt, p, q, n)
                # rotate every position except the first
                tmp = ring[m - 1]
                for i in range(m - 1, 1, -1):
                    ring[i] = ring[i - 1]
                if m > 1:
                    ring[1] = tmp
            sweeps += 1
            off = _offnorm(a, n)
    diag = np.array([a[i, i] for i in range(n)], dtype=np.float64)
    return diag, vt_arr.T.copy(), int(sweeps), float(off)


cdef inline bint _better(double ka, cnp.int64_t ia, double kb, cnp.int64_t ib) noexcept nogil:
    return ka > kb or (ka == kb and ia < ib)


cdef void _insert(double key, cnp.int64_t idx, double* keys, cnp.int64_t* ids,
                  Py_ssize_t* filled, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t pos = filled[0]
    if pos == p:
        if not _better(key, idx, keys[p - 1], ids[p - 1]):
            return
        pos = p - 1
    else:
        filled[0] += 1
    while pos > 0 and _better(key, idx, keys[pos - 1], ids[pos - 1]):
        keys[pos] = keys[pos - 1]
        ids[pos] = ids[pos - 1]
        pos -= 1
    keys[pos] = key
    ids[pos] = idx


def topp_columns(keys_in, Py_ssize_t p):
    """Top-p row ids per column of ``keys_in`` (descending, ties by id)."""
    cdef double[:, :] keys = np.asarray(keys_in, dtype=np.float64)
    cdef Py_ssize_t n = keys.shape[0], ncol = keys.shape[1]
    out = np.full((ncol, p), -1, dtype=np.int64)
    counts = np.zeros(ncol, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef cnp.int64_t[::1] cnt = counts
    kbuf = np.empty(p, dtype=np.float64)
    cdef double[::1] kb = kbuf
    cdef Py_ssize_t col, i, filled
    with nogil:
        for col in range(ncol):
            filled = 0
            for i in range(n):
                _insert(keys[i, col], i, &kb[0], &o[col, 0], &filled, p)
            cnt[col] = filled
    return out, counts


cdef class _PPRWorkspace:
    cdef double[::1] term, nterm, acc
    cdef cnp.int64_t[::1] tsupp, ntsupp, asupp, mark, amark
    cdef cnp.int64_t stamp, astamp
    cdef Py_ssize_t nacc

    def __init__(self, Py_ssize_t n):
        self.term = np.zeros(n)
        self.nterm = np.zeros(n)
        self.acc = np.zeros(n)
        self.tsupp = np.zeros(n, dtype=np.int64)
        self.ntsupp = np.zeros(n, dtype=np.int64)
        self.asupp = np.zeros(n, dtype=np.int64)
        self.mark = np.zeros(n, dtype=np.int64)
        self.amark = np.zeros(n, dtype=np.int64)
        self.stamp = 0
        self.astamp = 0
        self.nacc = 0


cdef Py_ssize_t _ppr_column(_PPRWorkspace ws, const cnp.int64_t[::1] indptr,
                            const cnp.int64_t[::1] indices, const double[::1] data,
                            cnp.int64_t v, double c, double tol, Py_ssize_t max_steps,
                            double drop_tol, double* resid) noexcept nogil:
    """Accumulate Neumann terms (1-c) c^k A^k e_v until a term's L1 norm < tol.

    The residual is the L1 norm of the propagated part of the last term.

    This is the fixed-point iteration r <- c A r + (1-c) e_v started at
    (1-c) e_v, written in increments. Term entries below ``drop_tol`` are
    still added to the result but not propagated. Result left in ws.acc,
    its support in ws.asupp[:ws.nacc].
    """
    cdef double[::1] term = ws.term
    cdef double[::1] nterm = ws.nterm
    cdef double[::1] acc = ws.acc
    cdef cnp.int64_t[::1] mark = ws.mark
    cdef cnp.int64_t[::1] amark = ws.amark
    cdef cnp.int64_t[::1] tsupp = ws.tsupp
    cdef cnp.int64_t[::1] ntsupp = ws.ntsupp
    cdef cnp.int64_t[::1] asupp = ws.asupp
    cdef Py_ssize_t nt, nnew, a, b, step = 0, kept, nacc
    cdef cnp.int64_t i, j, st, ast
    cdef double x, diff = 0.0, live = 0.0
    ws.astamp += 1
    ast = ws.astamp
    term[v] = 1.0 - c
    tsupp[0] = v
    nt = 1
    acc[v] = 1.0 - c
    amark[v] = ast
    asupp[0] = v
    nacc = 1
    while step < max_steps:
        ws.stamp += 1
        st = ws.stamp
        nnew = 0
        for a in range(nt):
            i = tsupp[a]
            x = c * term[i]
            term[i] = 0.0
            for b in range(indptr[i], indptr[i + 1]):
                j = indices[b]
                if mark[j] != st:
                    mark[j] = st
                    nterm[j] = 0.0
                    ntsupp[nnew] = j
                    nnew += 1
                nterm[j] += data[b] * x
        diff = 0.0
        live = 0.0
        kept = 0
        for a in range(nnew):
            j = ntsupp[a]
            x = nterm[j]
            nterm[j] = 0.0
            diff += fabs(x)
            if amark[j] != ast:
                amark[j] = ast
                acc[j] = 0.0
                asupp[nacc] = j
                nacc += 1
            acc[j] += x
            if x != 0.0 and fabs(x) >= drop_tol:
                live += fabs(x)
                term[j] = x
                tsupp[kept] = j
                kept += 1
        nt = kept
        step += 1
        if live < tol:
            break
    for a in range(nt):
        term[tsupp[a]] = 0.0
    ws.nacc = nacc
    resid[0] = live
    return step


cdef void _clear(_PPRWorkspace ws) noexcept nogil:
    cdef Py_ssize_t a
    for a in range(ws.nacc):
        ws.acc[ws.asupp[a]] = 0.0
    ws.nacc = 0


def ppr_dense(indptr, indices, data, Py_ssize_t n, double c, double tol, Py_ssize_t max_steps):
    """Exact iterative PPR for every node; column v of the result is r_v."""
    cdef const cnp.int64_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const cnp.int64_t[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const double[::1] dv = np.ascontiguousarray(data, dtype=np.float64)
    rt = np.zeros((n, n))
    steps = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n)
    cdef double[:, ::1] R = rt
    cdef cnp.int64_t[::1] st = steps
    cdef double[::1] rs = resid
    cdef _PPRWorkspace ws = _PPRWorkspace(n)
    cdef Py_ssize_t v, a
    cdef cnp.int64_t j
    cdef double r
    for v in range(n):
        st[v] = _ppr_column(ws, ip, ix, dv, v, c, tol, max_steps, 0.0, &r)
        rs[v] = r
        for a in range(ws.nacc):
            j = ws.asupp[a]
            R[v, j] = ws.acc[j]
        _clear(ws)
    return rt.T.copy(), steps, resid


def ppr_topp(indptr, indices, data, Py_ssize_t n, double c, double tol,
             Py_ssize_t max_steps, double drop_tol, Py_ssize_t p, double tie_scale):
    """Streaming PPR + top-p: never materializes more than one score column.

    Scores are ranked on ``rint(score / colmax * tie_scale)`` (raw scores
    when ``tie_scale`` is 0) so that near-equal values fall back to the
    id tie-break. Unreached nodes score exactly zero.
    """
    cdef const cnp.int64_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const cnp.int64_t[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const double[::1] dv = np.ascontiguousarray(data, dtype=np.float64)
    idx_arr = np.full((n, p), -1, dtype=np.int64)
    score_arr = np.zeros((n, p))
    counts = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n)
    cdef cnp.int64_t[:, ::1] out = idx_arr
    cdef double[:, ::1] sc = score_arr
    cdef cnp.int64_t[::1] cnt = counts
    cdef cnp.int64_t[::1] st = steps
    cdef double[::1] rs = resid
    kbuf = np.empty(p, dtype=np.float64)
    cdef double[::1] kb = kbuf
    cdef _PPRWorkspace ws = _PPRWorkspace(n)
    cdef Py_ssize_t v, a, filled, k
    cdef cnp.int64_t j, z
    cdef double r, vmax, key, val
    with nogil:
        for v in range(n):
            st[v] = _ppr_column(ws, ip, ix, dv, v, c, tol, max_steps, drop_tol, &r)
            rs[v] = r
            vmax = 0.0
            for a in range(ws.nacc):
                val = ws.acc[ws.asupp[a]]
                if val > vmax:
                    vmax = val
            filled = 0
            for a in range(ws.nacc):
                j = ws.asupp[a]
                val = ws.acc[j]
                if val <= 0.0:
                    continue
                key = rint(val / vmax * tie_scale) if tie_scale > 0.0 else val
                if key <= 0.0:
                    continue
                _insert(key, j, &kb[0], &out[v, 0], &filled, p)
            for k in range(filled):
                sc[v, k] = ws.acc[out[v, k]]
            # remaining slots: nodes whose rank key is zero, in id order
            if filled < p:
                ws.stamp += 1
                for k in range(filled):
                    ws.mark[out[v, k]] = ws.stamp
                z = 0
                while filled < p and z < n:
                    if ws.mark[z] != ws.stamp:
                        out[v, filled] = z
                        sc[v, filled] = ws.acc[z] if ws.amark[z] == ws.astamp else 0.0
                        filled += 1
                    z += 1
            cnt[v] = filled
            _clear(ws)
    return idx_arr, score_arr, counts, steps, resid


def layer_norm(x_in, scale_in, shift_in, double eps, row_mask=None):
    """Row-wise layer norm of a 2-D array; masked-out rows give zeros.

    Returns (y, xhat, rstd) with rstd shaped (rows, 1).
    """
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[::1] g = np.ascontiguousarray(scale_in, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(shift_in, dtype=np.float64)
    cdef Py_ssize_t R = x.shape[0], W = x.shape[1], r, j
    mk = np.ones(R, dtype=np.uint8) if row_mask is None else \
        np.ascontiguousarray(row_mask, dtype=np.uint8).reshape(-1)
    cdef const unsigned char[::1] m = mk
    y_arr = np.empty((R, W))
    xh_arr = np.empty((R, W))
    rs_arr = np.empty((R, 1))
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xh = xh_arr
    cdef double[:, ::1] rs = rs_arr
    cdef double mu, var, t, inv
    with nogil:
        for r in range(R):
            mu = 0.0
            for j in range(W):
                mu += x[r, j]
            mu /= W
            var = 0.0
            for j in range(W):
                t = x[r, j] - mu
                var += t * t
            inv = 1.0 / sqrt(var / W + eps)
            rs[r, 0] = inv
            for j in range(W):
                t = (x[r, j] - mu) * inv
                xh[r, j] = t
                y[r, j] = t * g[j] + b[j] if m[r] else 0.0
    return y_arr, xh_arr, rs_arr


def layer_norm_backward(dy_in, xhat_in, rstd_in, scale_in, row_mask=None):
    """Gradients (dx, dscale, dshift) for :func:`layer_norm`."""
    cdef const double[:, ::1] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef const double[:, ::1] xh = np.ascontiguousarray(xhat_in, dtype=np.float64)
    cdef const double[:, ::1] rs = np.ascontiguousarray(rstd_in, dtype=np.float64).reshape(-1, 1)
    cdef const double[::1] g = np.ascontiguousarray(scale_in, dtype=np.float64)
    cdef Py_ssize_t R = dy.shape[0], W = dy.shape[1], r, j
    mk = np.ones(R, dtype=np.uint8) if row_mask is None else \
        np.ascontiguousarray(row_mask, dtype=np.uint8).reshape(-1)
    cdef const unsigned char[::1] m = mk
    dx_arr = np.zeros((R, W))
    dg_arr = np.zeros(W)
    db_arr = np.zeros(W)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double s1, s2, d
    with nogil:
        for r in range(R):
            if not m[r]:
                continue
            s1 = 0.0
            s2 = 0.0
            for j in range(W):
                d = dy[r, j] * g[j]
                s1 += d
                s2 += d * xh[r, j]
                dg[j] += dy[r, j] * xh[r, j]
                db[j] += dy[r, j]
            s1 /= W
            s2 /= W
            for j in range(W):
                dx[r, j] = rs[r, 0] * (dy[r, j] * g[j] - s1 - xh[r, j] * s2)
    return dx_arr, dg_arr, db_arr
