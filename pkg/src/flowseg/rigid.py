"""Rigid transforms, weighted Kabsch alignment, and point-to-point ICP.

Kabsch follows the classic SVD construction (Arun et al. 1987): centroids
removed, cross-covariance decomposed, and the smallest singular direction
sign-flipped when needed so the rotation is proper (det = +1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import FlowField, PointCloud
from .neighbors import VoxelGrid, nearest_neighbors

_ORTHO_TOL = 1e-9


class TooFewPoints(ValueError):
    pass


class DegenerateConfigurationWarning(UserWarning):
    """Cross-covariance rank < 2: rotation is best-effort in the null space."""


class ConvergenceWarning(UserWarning):
    """ICP hit max_iters without meeting tol; the last iterate is returned."""


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        tr = np.ascontiguousarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or tr.shape != (3,):
            raise ValueError("rotation must be (3, 3) and translation (3,)")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot = self.rotation.T
        return RigidTransform(rot, -rot @ self.translation)

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``inner`` first, then this one."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )


def _points_of(x) -> np.ndarray:
    pts = getattr(x, "points", x)
    return np.ascontiguousarray(pts, dtype=np.float64)


def kabsch_align(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid alignment mapping src onto dst.

    Zero-weight points do not contribute. With a rank-deficient weighted
    cross-covariance the result is still returned (best effort) and a
    DegenerateConfigurationWarning is emitted.
    """
    src = _points_of(src)
    dst = _points_of(dst)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"src/dst must both be (M, 3), got {src.shape} vs {dst.shape}")
    m = len(src)
    if m < 3:
        raise TooFewPoints(f"need at least 3 point pairs, got {m}")
    if weights is None:
        weights = np.ones(m)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (m,):
            raise ValueError("weights must be one scalar per pair")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("weights sum to zero")

    c_src = (weights[:, None] * src).sum(axis=0) / wsum
    c_dst = (weights[:, None] * dst).sum(axis=0) / wsum
    a = (src - c_src) * weights[:, None]
    h = a.T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        warnings.warn(
            "cross-covariance rank < 2; rotation under-determined",
            DegenerateConfigurationWarning,
            stacklevel=2,
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, c_dst - rot @ c_src)


def icp_ego_motion(static_src, static_dst, max_iters: int = 50, tol: float = 1e-6) -> RigidTransform:
    """Point-to-point ICP between the static parts of two frames.

    Alternates nearest-neighbor correspondence / Kabsch refit, rejecting
    pairs farther than 3x the median correspondence distance each round,
    until the mean kept residual (or its change) drops below tol.
    """
    src = _points_of(static_src)
    dst = _points_of(static_dst)
    if len(src) < 10 or len(dst) < 10:
        raise TooFewPoints(
            f"ICP needs >= 10 static points per frame, got {len(src)} and {len(dst)}"
        )
    diag = float(np.linalg.norm(dst.max(axis=0) - dst.min(axis=0)))
    grid = VoxelGrid(dst, max(diag / 50.0, 1e-3))

    transform = RigidTransform.identity()
    prev_res = np.inf
    for _ in range(max_iters):
        warped = transform.apply(src)
        idx, sqd = nearest_neighbors(grid, warped)
        dist = np.sqrt(sqd)
        keep = dist <= 3.0 * np.median(dist)
        if keep.sum() < 3:
            keep = np.ones(len(src), dtype=bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateConfigurationWarning)
            transform = kabsch_align(src[keep], dst[idx[keep]])
        res = float(
            np.linalg.norm(transform.apply(src[keep]) - dst[idx[keep]], axis=1).mean()
        )
        if res < tol or abs(prev_res - res) < tol:
            return transform
        prev_res = res
    warnings.warn(
        f"ICP did not converge within {max_iters} iterations", ConvergenceWarning,
        stacklevel=2,
    )
    return transform


def ego_flow(cloud, transform: RigidTransform) -> FlowField:
    """Per-point displacement induced by the ego motion alone."""
    pts = _points_of(cloud)
    return FlowField(transform.apply(pts) - pts, "ego")
