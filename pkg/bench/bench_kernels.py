"""Time the loop kernels in both backends and print a comparison table.

Run:  python3 bench/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from progfusion import kernels
from progfusion.backend import HAVE_NUMBA


def _time(fn, *args, repeats: int) -> float:
    fn(*args)  # warmup (and JIT compile for the numba variants)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    vol = rng.standard_normal((2, 64, 64, 64))
    rows = kernels.gather_patches_numpy(vol, 8)
    values = rng.standard_normal(500_000)
    src = np.linspace(0.0, 1.0, 11)
    dst = np.sqrt(src)
    pos = rng.standard_normal(3_000)
    neg = rng.standard_normal(3_000)

    cases = [
        ("gather_patches  2x64^3 p=8", kernels.gather_patches_numpy,
         getattr(kernels, "gather_patches_numba", None), (vol, 8)),
        ("scatter_patches 512x1024", kernels.scatter_patches_numpy,
         getattr(kernels, "scatter_patches_numba", None), (rows, 2, 64, 64, 64, 8)),
        ("piecewise_map   5e5 values", kernels.piecewise_map_numpy,
         getattr(kernels, "piecewise_map_numba", None), (values, src, dst)),
        ("auc_pair_count  3k x 3k", kernels.auc_pair_count_numpy,
         getattr(kernels, "auc_pair_count_numba", None), (pos, neg)),
    ]

    print(f"{'kernel':<28} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}")
    print("-" * 64)
    for name, np_fn, nb_fn, fn_args in cases:
        t_np = _time(np_fn, *fn_args, repeats=args.repeats) * 1e3
        if HAVE_NUMBA and nb_fn is not None:
            t_nb = _time(nb_fn, *fn_args, repeats=args.repeats) * 1e3
            print(f"{name:<28} {t_np:>12.3f} {t_nb:>12.3f} {t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<28} {t_np:>12.3f} {'n/a':>12} {'n/a':>9}")


if __name__ == "__main__":
    main()
