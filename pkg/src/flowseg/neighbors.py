"""Voxel-hash grid and neighbor queries.

A :class:`VoxelGrid` maps each point to the integer cell ``floor(p / cell)``
and stores points grouped by cell. Queries (k nearest neighbors, radius
ball, cross-cloud nearest neighbor, occupancy ray march) run through one of
two interchangeable kernel modules: the compiled ``flowseg._kernels``
extension, or the pure-numpy ``flowseg._kernels_py`` fallback. The compiled
one is preferred at import; set ``FLOWSEG_PURE_PYTHON=1`` to force the
fallback. Both return bit-identical results.

Conventions shared by every query: distances are squared float64 sums in
x, y, z order; ties break toward the smaller point index; ball queries use
the closed ball (``<= radius``) and exclude the query point itself.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

if os.environ.get("FLOWSEG_PURE_PYTHON"):
    from . import _kernels_py as _impl

    COMPILED = False
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        from . import _kernels_py as _impl  # type: ignore[no-redef]

        COMPILED = False


def _writable_f64(a) -> np.ndarray:
    """Contiguous float64 view the compiled kernels can borrow (not read-only)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a if a.flags.writeable else a.copy()


class NonPositiveCellSize(ValueError):
    pass


class NonPositiveRadius(ValueError):
    pass


class KTooLarge(ValueError):
    """More neighbors requested than other points exist."""


class EmptyCloud(ValueError):
    pass


@dataclass(frozen=True)
class NeighborQueryConfig:
    """Neighborhood sizes used by the mask-consistency objective."""

    k: int = 8
    radius: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.radius <= 0:
            raise NonPositiveRadius(f"radius must be positive, got {self.radius}")


class VoxelGrid:
    """Points bucketed into cells of edge ``cell_size`` by ``floor(p / cell)``."""

    def __init__(self, points, cell_size: float):
        if cell_size <= 0:
            raise NonPositiveCellSize(f"cell_size must be positive, got {cell_size}")
        pts = getattr(points, "points", points)
        pts = _writable_f64(pts)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise EmptyCloud("cannot build a grid over zero points")
        self.points = pts
        self.cell_size = float(cell_size)
        self.cell_of = np.floor(pts / self.cell_size).astype(np.int64)
        keys = _impl.pack_cells(self.cell_of)
        self._order = np.argsort(keys, kind="stable").astype(np.int64)
        sorted_keys = keys[self._order]
        self._cell_keys, first = np.unique(sorted_keys, return_index=True)
        self._starts = np.append(first, len(pts)).astype(np.int64)
        self._bounds = np.stack(
            [self.cell_of.min(axis=0), self.cell_of.max(axis=0)]
        ).astype(np.int64)
        self._cells_dict = None

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def n_cells(self) -> int:
        return len(self._cell_keys)

    def cell_index(self, i: int) -> tuple:
        return tuple(int(v) for v in self.cell_of[i])

    @property
    def cells(self) -> dict:
        """Cell tuple -> ascending point indices. Built lazily; do not mutate."""
        if self._cells_dict is None:
            out = {}
            for slot in range(self.n_cells):
                idx = self._order[self._starts[slot] : self._starts[slot + 1]]
                out[tuple(int(v) for v in self.cell_of[idx[0]])] = idx
            self._cells_dict = out
        return self._cells_dict

    def occupied(self, cells) -> np.ndarray:
        """Boolean mask: does each integer cell hold at least one point?"""
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        inside = np.all(cells >= self._bounds[0], axis=1) & np.all(
            cells <= self._bounds[1], axis=1
        )
        keys = _impl.pack_cells(np.clip(cells, self._bounds[0], self._bounds[1]))
        slot = np.minimum(
            np.searchsorted(self._cell_keys, keys), len(self._cell_keys) - 1
        )
        return inside & (self._cell_keys[slot] == keys)

    def _query_args(self):
        return (
            self.points,
            self._cell_keys,
            self._starts,
            self._order,
            self._bounds,
            self.cell_size,
        )


def build_voxel_grid(cloud, cell_size: float) -> VoxelGrid:
    return VoxelGrid(cloud, cell_size)


def _check_index(grid: VoxelGrid, query_index: int):
    if not 0 <= query_index < grid.n:
        raise IndexError(f"query index {query_index} out of range for {grid.n} points")


def knn(grid: VoxelGrid, query_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest other points, ordered by (distance, index)."""
    return knn_batch(grid, k, np.array([query_index], dtype=np.int64))[0]


def knn_batch(grid: VoxelGrid, k: int, queries=None) -> np.ndarray:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > grid.n - 1:
        raise KTooLarge(f"k={k} but the cloud has only {grid.n} points")
    if queries is None:
        queries = np.arange(grid.n, dtype=np.int64)
    else:
        queries = np.ascontiguousarray(queries, dtype=np.int64)
        for q in queries:
            _check_index(grid, q)
    return _impl.knn_batch(*grid._query_args(), queries, k)


def ball_query(grid: VoxelGrid, query_index: int, radius: float) -> np.ndarray:
    """Ascending indices of other points within the closed ball of ``radius``."""
    flat, counts = ball_batch(grid, radius, np.array([query_index], dtype=np.int64))
    return flat[: counts[0]]


def ball_batch(grid: VoxelGrid, radius: float, queries=None):
    """CSR neighborhoods: (flat indices, per-query counts)."""
    if radius <= 0:
        raise NonPositiveRadius(f"radius must be positive, got {radius}")
    if queries is None:
        queries = np.arange(grid.n, dtype=np.int64)
    else:
        queries = np.ascontiguousarray(queries, dtype=np.int64)
        for q in queries:
            _check_index(grid, q)
    return _impl.ball_batch(*grid._query_args(), queries, radius)


def nearest_neighbors(grid: VoxelGrid, query_points):
    """Nearest grid point to each query point: (indices, squared distances)."""
    qp = _writable_f64(query_points)
    if qp.ndim != 2 or qp.shape[1] != 3:
        raise ValueError(f"query points must have shape (Q, 3), got {qp.shape}")
    return _impl.nn_cross(*grid._query_args(), qp)


def raycast_first_hit(grid: VoxelGrid, origins, units, t_start, t_stop, step: float):
    """First occupied cell along each ray, sampled at ``step`` from
    ``t_start`` (exclusive) to ``t_stop`` (inclusive). Returns (hit mask,
    cell centers)."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    origins = _writable_f64(origins)
    units = _writable_f64(units)
    t_start = _writable_f64(t_start)
    t_stop = _writable_f64(t_stop)
    return _impl.raycast_first_hit(
        grid._cell_keys, grid._bounds, grid.cell_size, origins, units, t_start, t_stop, step
    )
