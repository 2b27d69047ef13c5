#!/usr/bin/env python3
"""Benchmark the JIT-compiled kernels against their pure-numpy twins.

Usage:  python3 benchmarks/bench_kernels.py [--quick]

Times the fused voxel scan, the split scan, and an end-to-end 500-tree
forest fit on a full-size cohort table (176 rows, 63 features). The active
path for the forest fit follows CTSEV_NO_NUMBA, so run the script twice
(with and without the flag) to compare full fits; the kernel rows always
show both paths side by side.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from ctsev import _kernels
from ctsev.evaluation import gaussian_cohort_spec, synth_cohort
from ctsev.forest import ForestParams, fit_forest


def timeit(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times), statistics.median(times)


def bench_voxel_scan(side, repeats):
    rng = np.random.default_rng(0)
    n = side**3
    hu = rng.integers(-1100, 600, n).astype(np.int16)
    labels = rng.integers(0, 19, n).astype(np.uint8)
    flags = ((rng.random(n) < 0.3) & (labels > 0)).astype(np.uint8)
    rows = []
    if _kernels.HAVE_NUMBA:
        _kernels.voxel_scan_jit(hu, labels, flags)  # compile outside the timer
        best, med = timeit(lambda: _kernels.voxel_scan_jit(hu, labels, flags), repeats)
        rows.append((f"voxel_scan {side}^3", "numba", best, med))
    best, med = timeit(lambda: _kernels.voxel_scan_numpy(hu, labels, flags), repeats)
    rows.append((f"voxel_scan {side}^3", "numpy", best, med))
    return rows


def bench_split_scan(n, m, repeats):
    rng = np.random.default_rng(1)
    values = rng.normal(0, 1, (n, m))
    y = (rng.random(n) < 0.4).astype(np.uint8)
    n1 = int(y.sum())
    n0 = n - n1
    w0, w1 = 0.8, 1.6
    wt = n0 * w0 + n1 * w1
    args = (values, y, w0, w1, n0, n1, wt)
    rows = []
    if _kernels.HAVE_NUMBA:
        _kernels.split_scan_jit(*args)
        best, med = timeit(lambda: _kernels.split_scan_jit(*args), repeats)
        rows.append((f"split_scan {n}x{m}", "numba", best, med))
    best, med = timeit(lambda: _kernels.split_scan_numpy(*args), repeats)
    rows.append((f"split_scan {n}x{m}", "numpy", best, med))
    return rows


def bench_forest_fit(trees, repeats):
    ds = synth_cohort(gaussian_cohort_spec(n_per_class=(121, 55), seed=3, separation=2.0))
    path = "numba" if _kernels.NUMBA_ENABLED else "numpy"
    fit_forest(ds, ForestParams(trees=10), seed=0)  # warm the active kernel
    best, med = timeit(lambda: fit_forest(ds, ForestParams(trees=trees), seed=0), repeats)
    return [(f"fit_forest {trees} trees, 176x63", path, best, med)]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="fewer repeats, smaller sizes")
    args = parser.parse_args(argv)

    repeats = 3 if args.quick else 7
    print(f"numba available: {_kernels.HAVE_NUMBA}; active path: "
          f"{'numba' if _kernels.NUMBA_ENABLED else 'numpy'}")

    rows = []
    rows += bench_voxel_scan(64 if args.quick else 128, repeats)
    rows += bench_split_scan(176, 8, max(repeats * 20, 50))
    rows += bench_split_scan(2000, 8, repeats)
    rows += bench_forest_fit(100 if args.quick else 500, max(repeats // 2, 2))

    width = max(len(r[0]) for r in rows) + 2
    print(f"\n{'kernel':<{width}}{'path':<8}{'best':>12}{'median':>12}")
    by_name = {}
    for name, path, best, med in rows:
        print(f"{name:<{width}}{path:<8}{best * 1e3:>10.3f}ms{med * 1e3:>10.3f}ms")
        by_name.setdefault(name, {})[path] = best
    print()
    for name, paths in by_name.items():
        if "numba" in paths and "numpy" in paths:
            print(f"{name}: numba is {paths['numpy'] / paths['numba']:.1f}x "
                  f"faster than the numpy twin")
    return 0


if __name__ == "__main__":
    sys.exit(main())
