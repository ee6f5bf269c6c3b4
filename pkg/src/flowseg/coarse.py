"""Unsupervised coarse motion labels for a frame pair.

A source point is flagged dynamic when the target frame's geometry near its
ray-projected position is farther away than a range-proportional threshold:
``dist(nearest target point, proj(p)) / range(p) > ratio_threshold``. The
projection tolerates range quantization: if the point's occupancy cell is
filled in the target the point projects to itself; otherwise the ray from
the sensor is marched a short distance beyond the point (max_march) and the
first occupied cell center, if any, is used; otherwise the point again
projects to itself. Dynamic points are then grouped with DBSCAN and
optionally pruned by temporal agreement with the adjacent frames' clusters.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .data import FramePair, LengthMismatch
from .neighbors import (
    EmptyCloud,
    NonPositiveRadius,
    VoxelGrid,
    ball_batch,
    nearest_neighbors,
    raycast_first_hit,
)

DEFAULT_RAY_CELL = 0.2
DEFAULT_RATIO_THRESHOLD = 0.012
DEFAULT_MAX_MARCH = 0.6
DEFAULT_EPS = 0.8
DEFAULT_MIN_PTS = 10
DEFAULT_MATCH_RADIUS = 1.0

NOISE = -1


@dataclass(frozen=True)
class DynamicMask:
    """Per-point dynamic flags for the source frame of a pair."""

    flags: np.ndarray
    ratio_threshold: float

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool))

    @property
    def n(self) -> int:
        return len(self.flags)


@dataclass(frozen=True)
class ClusterSet:
    """Cluster assignment per point: -1 noise/static, ids contiguous from 1."""

    points: np.ndarray
    assignments: np.ndarray
    eps: float
    min_pts: int

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        asg = np.ascontiguousarray(self.assignments, dtype=np.int64)
        if len(pts) != len(asg):
            raise LengthMismatch(
                f"{len(asg)} assignments for {len(pts)} points"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "assignments", asg)

    @property
    def n(self) -> int:
        return len(self.assignments)

    @property
    def n_clusters(self) -> int:
        return int(self.assignments.max(initial=0))

    def members(self, cluster_id: int) -> np.ndarray:
        return np.nonzero(self.assignments == cluster_id)[0]


@dataclass(frozen=True)
class PseudoLabels:
    """Instance labels distilled from motion: 0 static/noise, ids from 1."""

    labels: np.ndarray
    source_frame: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64)
        )

    @property
    def n(self) -> int:
        return len(self.labels)


def raycast_dynamic_mask(
    pair: FramePair,
    cell: float = DEFAULT_RAY_CELL,
    ratio_threshold: float = DEFAULT_RATIO_THRESHOLD,
    max_march: float = DEFAULT_MAX_MARCH,
) -> DynamicMask:
    """Flag source points whose target-frame evidence is missing.

    The pair's ego-pose hint, when present, aligns the source frame (and its
    sensor origin) into the target frame before the occupancy comparison.
    Ranges in the decision ratio are measured in the source sensor frame;
    points at exactly zero range are forced static.
    """
    source, target = pair.source, pair.target
    if source.n == 0 or target.n == 0:
        raise EmptyCloud("raycast needs non-empty source and target clouds")

    ranges = np.linalg.norm(source.points, axis=1)
    if pair.ego_pose_hint is not None:
        src = pair.ego_pose_hint.apply(source.points)
        origin = pair.ego_pose_hint.apply(np.zeros(3))
    else:
        src = source.points
        origin = np.zeros(3)

    occupancy = VoxelGrid(target.points, cell)
    src_cells = np.floor(src / cell).astype(np.int64)
    occupied = occupancy.occupied(src_cells)

    proj = src.copy()
    rel = src - origin
    dist = np.linalg.norm(rel, axis=1)
    march = ~occupied & (dist > 0)
    if np.any(march):
        units = rel[march] / dist[march, None]
        hit, centers = raycast_first_hit(
            occupancy,
            np.tile(origin, (int(march.sum()), 1)),
            units,
            dist[march],
            dist[march] + max_march,
            cell / 3.0,
        )
        who = np.nonzero(march)[0][hit]
        proj[who] = centers[hit]

    _, nn_sqd = nearest_neighbors(occupancy, proj)
    numer = np.sqrt(nn_sqd)
    flags = np.zeros(source.n, dtype=bool)
    nonzero = ranges > 0
    flags[nonzero] = numer[nonzero] / ranges[nonzero] > ratio_threshold
    return DynamicMask(flags, ratio_threshold)


def dbscan(points, eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> ClusterSet:
    """Density clustering with deterministic index-ordered seed expansion.

    A point is core when its closed eps-ball (itself included) holds at
    least min_pts points. Clusters are grown breadth-first from the lowest
    unassigned core index; ids are assigned contiguously from 1 in discovery
    order, and unreachable points stay -1 (noise).
    """
    pts = np.ascontiguousarray(getattr(points, "points", points), dtype=np.float64)
    if eps <= 0:
        raise NonPositiveRadius(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    n = len(pts)
    assignments = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterSet(pts, assignments, eps, min_pts)

    grid = VoxelGrid(pts, eps)
    flat, counts = ball_batch(grid, eps)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    core = counts + 1 >= min_pts

    cluster_id = 0
    for i in range(n):
        if assignments[i] != NOISE or not core[i]:
            continue
        cluster_id += 1
        assignments[i] = cluster_id
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for q in flat[offsets[j] : offsets[j + 1]]:
                if assignments[q] == NOISE:
                    assignments[q] = cluster_id
                    if core[q]:
                        queue.append(q)
    return ClusterSet(pts, assignments, eps, min_pts)


def cluster_dynamic(cloud, mask: DynamicMask, eps: float = DEFAULT_EPS,
                    min_pts: int = DEFAULT_MIN_PTS) -> ClusterSet:
    """DBSCAN over the dynamic subset, scattered back to full-cloud size."""
    pts = np.ascontiguousarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if len(pts) != mask.n:
        raise LengthMismatch(f"{mask.n} flags for {len(pts)} points")
    idx = np.nonzero(mask.flags)[0]
    sub = dbscan(pts[idx], eps, min_pts)
    assignments = np.full(len(pts), NOISE, dtype=np.int64)
    assignments[idx] = sub.assignments
    return ClusterSet(pts, assignments, eps, min_pts)


def _compact_ids(assignments: np.ndarray) -> np.ndarray:
    """Remap positive ids to contiguous 1..K preserving ascending order."""
    out = assignments.copy()
    old = np.unique(assignments[assignments > 0])
    for new, o in enumerate(old, start=1):
        out[assignments == o] = new
    return out


def temporal_refine(prev: ClusterSet | None, curr: ClusterSet,
                    nxt: ClusterSet | None,
                    match_radius: float = DEFAULT_MATCH_RADIUS) -> ClusterSet:
    """Keep clustered points corroborated by a neighbor frame's clusters.

    A point of a current cluster survives when some clustered point of the
    previous or next frame lies within match_radius of it. Clusters whose
    survivors fall below min_pts dissolve to noise; surviving ids are
    re-numbered contiguously from 1. Never adds points.
    """
    if match_radius <= 0:
        raise NonPositiveRadius(f"match_radius must be positive, got {match_radius}")
    clustered = curr.assignments > 0
    keep = np.zeros(curr.n, dtype=bool)
    r2 = match_radius * match_radius
    for other in (prev, nxt):
        if other is None:
            continue
        other_pts = other.points[other.assignments > 0]
        if len(other_pts) == 0 or not np.any(clustered):
            continue
        grid = VoxelGrid(other_pts, match_radius)
        _, sqd = nearest_neighbors(grid, curr.points[clustered])
        keep[clustered] |= sqd <= r2

    assignments = np.where(clustered & keep, curr.assignments, NOISE)
    for cid in range(1, curr.n_clusters + 1):
        if (assignments == cid).sum() < curr.min_pts:
            assignments[assignments == cid] = NOISE
    return ClusterSet(curr.points, _compact_ids(assignments), curr.eps, curr.min_pts)


def assemble_pseudo_labels(mask: DynamicMask, clusters: ClusterSet,
                           source_frame: int = 0) -> PseudoLabels:
    """Static -> 0, clustered dynamic -> cluster id, dynamic noise -> 0."""
    if mask.n != clusters.n:
        raise LengthMismatch(
            f"mask has {mask.n} flags, clusters cover {clusters.n} points"
        )
    labels = np.where(mask.flags & (clusters.assignments > 0),
                      clusters.assignments, 0)
    return PseudoLabels(labels, source_frame)
