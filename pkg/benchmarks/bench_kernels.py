#!/usr/bin/env python3
"""Benchmark the compiled assignment kernel against the numpy fallback.

Runs the hierarchical code-assignment hot path for the reference
configurations on representative latent grids and prints per-call times
and the speedup. Both backends are exercised regardless of which one the
package selected at import.
"""

import argparse
import time

import numpy as np

from shrvq.kernels import _assign_py

try:
    from shrvq.kernels import _assign as _assign_cy
except ImportError:
    _assign_cy = None

CONFIGS = [
    # (layers, branch, dim, grid)
    (1, 512, 8, 32),
    (3, 8, 8, 32),
    (9, 2, 8, 32),
    (1, 64, 4, 16),
    (3, 4, 4, 16),
    (6, 2, 4, 16),
]


def run_backend(impl, z, books, branch, repeats):
    P = z.shape[0]
    best = float("inf")
    codes = np.empty(P, dtype=np.int64)
    for _ in range(repeats):
        residual = z.copy()
        bank = np.zeros(P, dtype=np.int64)
        t0 = time.perf_counter()
        for layer_books in books:
            impl.assign_step(residual, layer_books, bank, codes)
            bank = bank * branch + codes
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'config':>22} {'numpy':>12} {'cython':>12} {'speedup':>8}")
    for n, M, D, grid in CONFIGS:
        books = [rng.normal(size=(M**i, M, D)).astype(np.float32) for i in range(n)]
        z = rng.normal(size=(grid * grid, D)).astype(np.float32)
        t_py = run_backend(_assign_py, z, books, M, args.repeats)
        label = f"n={n} M={M} D={D} {grid}x{grid}"
        if _assign_cy is None:
            print(f"{label:>22} {t_py * 1e3:>10.3f}ms {'missing':>12} {'-':>8}")
            continue
        t_cy = run_backend(_assign_cy, z, books, M, args.repeats)
        print(
            f"{label:>22} {t_py * 1e3:>10.3f}ms {t_cy * 1e3:>10.3f}ms "
            f"{t_py / t_cy:>7.1f}x"
        )


if __name__ == "__main__":
    main()
