"""Time the nearest-row kernels: numba ``@njit`` against the blocked numpy path.

    python benchmarks/bench_projection.py [--repeat 5]

Both backends are checked for identical ids before timing.
"""

import argparse
import timeit

import numpy as np

from pezlab import _kernels

SHAPES = [(8, 64, 16), (8, 1024, 64), (32, 4096, 64), (64, 16384, 128)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'M':>4} {'V':>6} {'d':>4} {'metric':>9} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for M, V, d in SHAPES:
        E = rng.normal(size=(V, d))
        Q = rng.normal(size=(M, d))
        allowed = np.ones(V, dtype=bool)
        norms = _kernels.row_norms(E)
        for metric in ("euclidean", "cosine"):
            fn = {
                "euclidean": lambda b: _kernels.nearest_euclidean(Q, E, allowed, b),
                "cosine": lambda b: _kernels.nearest_cosine(Q, E, allowed, norms, b),
            }[metric]
            assert np.array_equal(fn("numpy"), fn("numba"))  # also triggers compilation
            n = max(1, int(2e6 // (M * V * d)))
            t = {b: min(timeit.repeat(lambda b=b: fn(b), number=n, repeat=args.repeat)) / n * 1e3
                 for b in ("numpy", "numba")}
            print(f"{M:>4} {V:>6} {d:>4} {metric:>9} {t['numpy']:>10.3f} {t['numba']:>10.3f} "
                  f"{t['numpy'] / t['numba']:>7.1f}x")


if __name__ == "__main__":
    main()
