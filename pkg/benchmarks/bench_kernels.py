"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--levels 7]

Each kernel is called once per backend before timing so the numba JIT
compilation (or cache load) is excluded.  Reports the best of ``--repeat``
wall-clock times and the largest absolute difference between backends.
"""
import argparse
import time

import numpy as np

from projuq import _kernels
from projuq.problems import biharmonic_matrix


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--levels", type=int, default=7, help="biharmonic grid level for the matvec benchmark")
    ap.add_argument("--samples", type=int, default=20000, help="KDE sample count")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba unavailable (or disabled via PROJUQ_DISABLE_NUMBA); nothing to compare")

    rng = np.random.default_rng(0)
    A = biharmonic_matrix(args.levels, backend="numpy")
    N = 2 ** args.levels - 1
    X = rng.standard_normal((A.n_cols, 8))
    samples = rng.chisquare(50, size=args.samples)
    grid = np.linspace(0.0, 120.0, 512)
    h = 1.06 * samples.std(ddof=1) * samples.size ** -0.2

    cases = {
        f"csr_matmat  n={A.n_rows} x8": lambda b: _kernels.csr_matmat(A.indptr, A.indices, A.data, X, A.n_rows, backend=b),
        f"csr_rmatmat n={A.n_rows} x8": lambda b: _kernels.csr_rmatmat(A.indptr, A.indices, A.data, X, A.n_cols, backend=b),
        f"kde_eval    {args.samples} pts x 512": lambda b: _kernels.kde_eval(samples, grid, h, backend=b),
        f"biharmonic  N={N}": lambda b: _kernels.biharmonic_triplets(N, backend=b),
    }
    print(f"{'kernel':<34}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in cases.items():
        for b in ("numpy", "numba"):
            fn(b)
        t_np, out_np = best_time(lambda: fn("numpy"), args.repeat)
        t_nb, out_nb = best_time(lambda: fn("numba"), args.repeat)
        print(f"{name:<34}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}{_diff(out_np, out_nb):>12.2e}")


if __name__ == "__main__":
    main()
