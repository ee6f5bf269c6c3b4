"""Timing table: compiled spatial kernels vs the pure-Python fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--n 10000] [--repeats 5]

The fallback is what you get with FLOWSEG_PURE_PYTHON=1 (or when the
extension failed to build); this script imports both implementations
directly so one process can time the pair side by side.
"""

import argparse
import time

import numpy as np

from flowseg import _kernels_py
from flowseg.data import PointCloud
from flowseg.neighbors import VoxelGrid

try:
    from flowseg import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=10000, help="points")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    points = rng.uniform(-20, 20, size=(args.n, 3))
    points[:, 2] = np.abs(points[:, 2]) * 0.1
    cloud = PointCloud(points)
    grid = VoxelGrid(cloud, 0.5)
    qargs = grid._query_args()
    queries = np.arange(grid.n, dtype=np.int64)

    origins = np.zeros((args.n // 4, 3))
    targets = rng.uniform(-15, 15, size=(args.n // 4, 3))
    lengths = np.linalg.norm(targets, axis=1)
    units = targets / lengths[:, None]
    t_start = np.full(len(origins), 0.5)
    t_stop = lengths

    cases = [
        ("knn k=8", lambda mod: mod.knn_batch(*qargs, queries, 8)),
        ("ball r=0.5", lambda mod: mod.ball_batch(*qargs, queries, 0.5)),
        ("nn cross", lambda mod: mod.nn_cross(
            *qargs, np.ascontiguousarray(points[::2]))),
        ("raycast", lambda mod: mod.raycast_first_hit(
            grid._cell_keys, grid._bounds, 0.5, origins, units,
            t_start, t_stop, 0.5 / 3)),
    ]

    if _kernels_c is None:
        print("compiled extension not importable; timing fallback only")

    print(f"{args.n} points, best of {args.repeats}")
    header = f"{'kernel':<12} {'python':>10} {'compiled':>10} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, runner in cases:
        py = _timeit(lambda: runner(_kernels_py), args.repeats)
        if _kernels_c is None:
            print(f"{name:<12} {py * 1e3:9.1f}ms {'n/a':>10} {'n/a':>9}")
            continue
        cc = _timeit(lambda: runner(_kernels_c), args.repeats)
        print(f"{name:<12} {py * 1e3:9.1f}ms {cc * 1e3:9.1f}ms {py / cc:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
