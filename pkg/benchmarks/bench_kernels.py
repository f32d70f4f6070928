"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

Prints one line per kernel with the best-of-N wall time for each backend
and the speedup, after checking that both backends agree.
"""
import argparse
import time

import numpy as np

from gpatcher.graph import Graph, normalize_adjacency
from gpatcher.kernels import available_backends, get_backend


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(quick):
    rng = np.random.default_rng(0)
    n_eig = 120 if quick else 300
    M = rng.normal(size=(n_eig, n_eig))
    M = (M + M.T) / 2
    n_ppr = 2000 if quick else 10000
    g = Graph.from_edges(n_ppr, rng.integers(0, n_ppr, (5 * n_ppr, 2)), warn=False)
    csr = normalize_adjacency(g).csr_arrays()
    keys = rng.random((800, 800))
    x = rng.normal(size=(64000, 64))
    scale, shift = rng.normal(size=64), rng.normal(size=64)
    yield (f"jacobi_eigh n={n_eig}", lambda k: k.jacobi_eigh(M),
           lambda a, b: np.max(np.abs(a[0] - b[0])))
    yield (f"ppr_topp n={n_ppr} p=32 drop=1e-5",
           lambda k: k.ppr_topp(*csr, n_ppr, 0.5, 1e-8, 1000, 1e-5, 32, 1e12),
           lambda a, b: float(np.mean(a[0] != b[0])))
    yield ("topp_columns 800x800 p=32", lambda k: k.topp_columns(keys, 32),
           lambda a, b: float(np.mean(a[0] != b[0])))
    yield ("layer_norm 64000x64", lambda k: k.layer_norm(x, scale, shift, 1e-5),
           lambda a, b: np.max(np.abs(a[0] - b[0])))
    yield ("layer_norm_backward 64000x64",
           lambda k: k.layer_norm_backward(x, x, np.ones((x.shape[0], 1)), scale),
           lambda a, b: np.max(np.abs(a[0] - b[0])))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    names = available_backends()
    if "cython" not in names:
        print("compiled backend not built; only the fallback is available")
    print(f"{'kernel':40s} " + " ".join(f"{b:>10s}" for b in names) + "   speedup   diff")
    for label, fn, diff in cases(args.quick):
        times, outs = [], []
        for b in names:
            t, out = best_of(lambda: fn(get_backend(b)), args.repeat)
            times.append(t)
            outs.append(out)
        speed = times[-1] / times[0] if len(times) > 1 else 1.0
        d = diff(outs[0], outs[-1]) if len(outs) > 1 else 0.0
        print(f"{label:40s} " + " ".join(f"{t:9.4f}s" for t in times)
              + f"   {speed:6.1f}x   {d:.1e}")


if __name__ == "__main__":
    main()
