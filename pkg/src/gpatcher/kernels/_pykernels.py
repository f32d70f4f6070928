"""Pure numpy/scipy versions of the compiled kernels.

The Jacobi schedule is the same round-robin ordering used by the compiled
core; each round rotates n/2 disjoint pairs at once, which is exactly the
sequential result because rotations on disjoint index pairs commute.
"""
import numpy as np
import scipy.sparse as sp


def round_robin(n):
    """Yield (p, q) index arrays, p < q, for the n-1 rounds of one sweep."""
    m = n + (n % 2)
    ring = np.arange(m)
    for _ in range(m - 1):
        a = ring[: m // 2]
        b = ring[m - 1: m // 2 - 1: -1] if m // 2 > 0 else ring[:0]
        ok = (a < n) & (b < n)
        p, q = np.minimum(a, b)[ok], np.maximum(a, b)[ok]
        yield p, q
        ring = np.concatenate([ring[:1], ring[-1:], ring[1:-1]])


def _offnorm(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(np.square(off))))


def jacobi_eigh(a_in, rel_tol=1e-12, max_sweeps=100):
    a = np.array(a_in, dtype=np.float64, copy=True)
    n = a.shape[0]
    vt = np.eye(n)
    target = rel_tol * np.sqrt(np.sum(np.square(a)))
    sweeps = 0
    off = _offnorm(a) if n else 0.0
    while off > target and sweeps < max_sweeps:
        for p, q in round_robin(n):
            apq = a[p, q]
            nz = apq != 0.0
            if not nz.any():
                continue
            p, q, apq = p[nz], q[nz], apq[nz]
            app, aqq = a[p, p], a[q, q]
            with np.errstate(over="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, p] = app - t * apq
            a[q, q] = aqq + t * apq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = vt[p, :].copy(), vt[q, :].copy()
            vt[p, :] = c[:, None] * vp - s[:, None] * vq
            vt[q, :] = s[:, None] * vp + c[:, None] * vq
        # two-sided updates leave rounding-level asymmetry; re-symmetrize
        a = 0.5 * (a + a.T)
        sweeps += 1
        off = _offnorm(a)
    return np.diag(a).copy(), vt.T.copy(), sweeps, off


def topp_columns(keys_in, p):
    keys = np.asarray(keys_in, dtype=np.float64)
    n, ncol = keys.shape
    k = min(p, n)
    order = np.argsort(-keys, axis=0, kind="stable")[:k].T
    out = np.full((ncol, p), -1, dtype=np.int64)
    out[:, :k] = order
    return out, np.full(ncol, k, dtype=np.int64)


def _csr(indptr, indices, data, n):
    return sp.csr_matrix((np.asarray(data, dtype=np.float64), np.asarray(indices),
                          np.asarray(indptr)), shape=(n, n))


def ppr_dense(indptr, indices, data, n, c, tol, max_steps):
    A = _csr(indptr, indices, data, n)
    R = (1.0 - c) * np.eye(n)
    steps = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n)
    active = np.arange(n)
    step = 0
    while active.size and step < max_steps:
        cur = R[:, active]
        nxt = c * (A @ cur)
        nxt[active, np.arange(active.size)] += 1.0 - c
        diff = np.abs(nxt - cur).sum(axis=0)
        R[:, active] = nxt
        step += 1
        steps[active] = step
        resid[active] = diff
        active = active[diff >= tol]
    return R, steps, resid


def _rank_column(ids, vals, n, p, tie_scale):
    """Top-p of one sparse score column; unlisted nodes score zero."""
    pos = vals > 0.0
    ids, vals = ids[pos], vals[pos]
    if ids.size:
        keys = np.rint(vals / vals.max() * tie_scale) if tie_scale > 0 else vals
        ids, vals, keys = ids[keys > 0], vals[keys > 0], keys[keys > 0]
        order = np.lexsort((ids, -keys))[:p]
        top_ids, top_vals = ids[order], vals[order]
    else:
        top_ids, top_vals = ids, vals
    k = min(p, n)
    out = np.full(p, -1, dtype=np.int64)
    sc = np.zeros(p)
    out[: top_ids.size] = top_ids
    sc[: top_ids.size] = top_vals
    need = k - top_ids.size
    if need > 0:
        taken = np.zeros(n, dtype=bool)
        taken[top_ids] = True
        fill = np.flatnonzero(~taken)[:need]
        out[top_ids.size: k] = fill
        lookup = dict(zip(ids.tolist(), vals.tolist()))
        sc[top_ids.size: k] = [lookup.get(int(z), 0.0) for z in fill]
    return out, sc, k


def ppr_topp(indptr, indices, data, n, c, tol, max_steps, drop_tol, p, tie_scale,
             block=256):
    A = _csr(indptr, indices, data, n)
    out = np.full((n, p), -1, dtype=np.int64)
    scores = np.zeros((n, p))
    counts = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n)

    def finish(v, col, step, diff):
        col = col.tocoo()
        o, s, k = _rank_column(col.row.astype(np.int64), col.data, n, p, tie_scale)
        out[v], scores[v], counts[v] = o, s, k
        steps[v], resid[v] = step, diff

    for start in range(0, n, block):
        cols = np.arange(start, min(n, start + block))
        # accumulate Neumann terms; small term entries are kept in the sum
        # but not propagated further
        T = sp.csc_matrix(((1.0 - c) * np.ones(cols.size), (cols, np.arange(cols.size))),
                          shape=(n, cols.size))
        acc = T.copy()
        step = 0
        while cols.size:
            T = (c * (A @ T)).tocsc()
            acc = (acc + T).tocsc()
            if drop_tol > 0:
                T.data[np.abs(T.data) < drop_tol] = 0.0
                T.eliminate_zeros()
            diff = np.asarray(abs(T).sum(axis=0)).ravel()
            step += 1
            done = (diff < tol) | (step >= max_steps)
            for j in np.flatnonzero(done):
                finish(cols[j], acc[:, j], step, diff[j])
            live = ~done
            cols, T, acc = cols[live], T[:, live], acc[:, live]
    return out, scores, counts, steps, resid


def layer_norm(x_in, scale, shift, eps, row_mask=None):
    x = np.asarray(x_in, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * rstd
    y = xhat * scale + shift
    if row_mask is not None:
        y[~np.asarray(row_mask, dtype=bool).reshape(-1)] = 0.0
    return y, xhat, rstd


def layer_norm_backward(dy_in, xhat, rstd, scale, row_mask=None):
    dy = np.asarray(dy_in, dtype=np.float64)
    if row_mask is not None:
        dy = dy * np.asarray(row_mask, dtype=bool).reshape(-1, 1)
    dxhat = dy * scale
    dx = rstd.reshape(-1, 1) * (dxhat - dxhat.mean(axis=1, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)
