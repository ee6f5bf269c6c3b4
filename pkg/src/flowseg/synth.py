"""Deterministic synthetic scene pairs with exact ground truth.

Scenes imitate a sensor at the origin watching a roundabout: a ground
plane annulus plus distant vertical posts for background, and compact
rigid boxes circulating counter-clockwise on fixed-radius rings. Box
motion is tangential, so it is perpendicular to the sensor ray, which
keeps free-space carving informative, and speed grows linearly with
ring radius so velocity is a smooth function of position that a model
can learn and generalize to held-out scenes.

Layout constants below are load-bearing:
  - boxes sit at z = 1.8, well above the ground, so rays to them never
    graze ground cells;
  - per-frame displacement stays below the temporal-refinement match
    radius (1.0 m) or refinement would dissolve fast movers;
  - displacement minus the box diagonal (0.36 m) keeps displaced boxes
    far enough from their old cells that the range ratio clears the
    dynamic threshold at every ring radius;
  - posts live at radius 13 or beyond so a ray marched 0.6 m past a
    mover cannot land in one;
  - low rocks scattered over the annulus give the background vertical
    structure everywhere, which pins horizontal alignment (a bare plane
    leaves planar slides nearly free) while staying 0.65 m below the
    mover underside so no neighborhood query crosses the fg/bg gap.

Noise, when enabled, perturbs only frame t+1; gt_flow stays the clean
displacement so a perfect predictor scores the expected noise level.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import FramePair, PointCloud
from .rigid import RigidTransform

GROUND_INNER_RADIUS = 2.0
GROUND_HEIGHT = 0.05
POST_MIN_RADIUS = 13.0
# Posts stay below the mover boxes' underside (z = 1.45), so height alone
# separates foreground from background in the model's input space.
POST_HEIGHT = 1.0
POST_POINT_SHARE = 5
POINTS_PER_POST = 40
# Low rocks scattered over the whole annulus. A bare ground plane leaves
# horizontal rigid slides almost free for nearest-neighbor matching, so a
# trained model's planar flow bias wanders; vertical clutter spread across
# the scene pins it. Heights stay below the posts and well under the mover
# underside so the fg/bg height gate is untouched.
CLUTTER_POINT_SHARE = 5
CLUTTER_HEIGHT_RANGE = (0.3, 0.8)
POINTS_PER_ROCK = 12
# Radii chosen so speed = lo * R / R0 hits the speed cap exactly at the
# outer ring: every mover then shares one angular rate and the foreground
# velocity field is linear in position over the whole scene.
RING_RADII = (5.0, 7.5, 9.5)
MOVER_HALF_EXTENTS = (0.15, 0.10, 0.35)
MOVER_HEIGHT = 1.8
MOVER_CLEARANCE = 2.86
AZIMUTH_JITTER = 0.15
MIN_EXTENT = 15.0


def _default_ego() -> RigidTransform:
    return RigidTransform.from_yaw(0.01, (0.2, 0.05, 0.0))


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to reproduce one scene pair bit for bit."""

    seed: int = 0
    n_background: int = 1000
    # One mover per ring by default: movers on the same ring share a speed,
    # which makes their mask channels compete; one each keeps default
    # scenes unambiguous for instance separation.
    n_movers: int = 3
    points_per_mover: int = 80
    mover_speed_range: tuple = (0.5, 0.95)
    ego_motion: RigidTransform = field(default_factory=_default_ego)
    noise_sigma: float = 0.0
    extent: float = 24.0

    def __post_init__(self):
        if self.n_background < 0 or self.n_movers < 0 or self.points_per_mover < 0:
            raise ValueError("counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.mover_speed_range
        if not (0 < lo <= hi):
            raise ValueError("mover_speed_range must satisfy 0 < lo <= hi")
        if self.extent < MIN_EXTENT:
            raise ValueError(f"extent below {MIN_EXTENT} breaks the scene layout")
        if self.n_movers > sum(_ring_capacities()):
            raise ValueError("too many movers for the ring layout")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_background": self.n_background,
            "n_movers": self.n_movers,
            "points_per_mover": self.points_per_mover,
            "mover_speed_range": list(self.mover_speed_range),
            "ego_motion": {
                "rotation": self.ego_motion.rotation.tolist(),
                "translation": self.ego_motion.translation.tolist(),
            },
            "noise_sigma": self.noise_sigma,
            "extent": self.extent,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "SceneSpec":
        spec = cls()
        fields = {}
        for key in ("seed", "n_background", "n_movers", "points_per_mover",
                    "noise_sigma", "extent"):
            if key in blob:
                fields[key] = blob[key]
        if "mover_speed_range" in blob:
            fields["mover_speed_range"] = tuple(blob["mover_speed_range"])
        if "ego_motion" in blob:
            ego = blob["ego_motion"]
            fields["ego_motion"] = RigidTransform(
                np.asarray(ego["rotation"], dtype=np.float64),
                np.asarray(ego["translation"], dtype=np.float64),
            )
        return replace(spec, **fields)


def _ring_capacities() -> list:
    caps = []
    for radius in RING_RADII:
        arc_per_mover = MOVER_CLEARANCE + 2 * AZIMUTH_JITTER * radius
        caps.append(int(2 * np.pi * radius / arc_per_mover))
    return caps


def _mover_speed(radius: float, speed_range) -> float:
    """Speed proportional to ring radius, clipped to the configured range.

    Proportionality makes every mover obey one shared angular rate, so
    the mover velocity field is linear in position (v = omega * (-y, x, 0)
    at the box center) and a model can fit it quickly from few scenes.
    """
    lo, hi = speed_range
    return min(lo * (radius / RING_RADII[0]), hi)


def _sample_ground(rng, count: int, extent: float) -> np.ndarray:
    points = np.empty((0, 3))
    while len(points) < count:
        xy = rng.uniform(-extent, extent, size=(count * 2, 2))
        keep = (xy * xy).sum(axis=1) >= GROUND_INNER_RADIUS ** 2
        z = rng.uniform(0.0, GROUND_HEIGHT, size=(keep.sum(), 1))
        points = np.vstack([points, np.hstack([xy[keep], z])])
    return points[:count]


def _sample_posts(rng, count: int, extent: float) -> np.ndarray:
    if count == 0:
        return np.empty((0, 3))
    n_posts = max(1, count // POINTS_PER_POST)
    radius = rng.uniform(POST_MIN_RADIUS, extent - 1.0, size=n_posts)
    angle = rng.uniform(0.0, 2 * np.pi, size=n_posts)
    bases = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    owner = np.arange(count) % n_posts
    xy = bases[owner] + rng.uniform(-0.05, 0.05, size=(count, 2))
    z = rng.uniform(0.0, POST_HEIGHT, size=(count, 1))
    return np.hstack([xy, z])


def _sample_clutter(rng, count: int, extent: float) -> np.ndarray:
    if count == 0:
        return np.empty((0, 3))
    n_rocks = max(1, count // POINTS_PER_ROCK)
    radius = rng.uniform(GROUND_INNER_RADIUS + 0.5, extent - 1.0, size=n_rocks)
    angle = rng.uniform(0.0, 2 * np.pi, size=n_rocks)
    centers = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    half_xy = rng.uniform(0.1, 0.25, size=(n_rocks, 2))
    height = rng.uniform(*CLUTTER_HEIGHT_RANGE, size=n_rocks)
    owner = np.arange(count) % n_rocks
    xy = centers[owner] + rng.uniform(-1.0, 1.0, size=(count, 2)) * half_xy[owner]
    z = rng.uniform(0.0, height[owner])[:, None]
    return np.hstack([xy, z])


def _mover_slots(rng, n_movers: int):
    """(radius, azimuth) per mover, rings assigned round-robin.

    Round-robin spreads even a small mover count over several radii, so
    default scenes exercise more than one speed.
    """
    caps = _ring_capacities()
    counts = [0] * len(RING_RADII)
    ring = 0
    ring_of = []
    for _ in range(n_movers):
        while counts[ring] >= caps[ring]:
            ring = (ring + 1) % len(RING_RADII)
        ring_of.append(ring)
        counts[ring] += 1
        ring = (ring + 1) % len(RING_RADII)

    azimuths = []
    for index, count in enumerate(counts):
        phase = rng.uniform(0.0, 2 * np.pi)
        jitter = rng.uniform(-AZIMUTH_JITTER, AZIMUTH_JITTER, size=count)
        azimuths.append(phase + 2 * np.pi * np.arange(count) / max(count, 1)
                        + jitter)
    used = [0] * len(RING_RADII)
    slots = []
    for ring in ring_of:
        slots.append((RING_RADII[ring], float(azimuths[ring][used[ring]])))
        used[ring] += 1
    return slots


def generate_pair(spec: SceneSpec) -> FramePair:
    """One source/target pair with exact labels and flow on the source."""
    rng = np.random.default_rng(spec.seed)

    n_posts = spec.n_background // POST_POINT_SHARE
    n_clutter = spec.n_background // CLUTTER_POINT_SHARE
    ground = _sample_ground(rng, spec.n_background - n_posts - n_clutter,
                            spec.extent)
    posts = _sample_posts(rng, n_posts, spec.extent)
    clutter = _sample_clutter(rng, n_clutter, spec.extent)

    chunks = [ground, posts, clutter]
    labels = [np.zeros(len(ground) + len(posts) + len(clutter), dtype=np.int64)]
    shifts = []
    half = np.asarray(MOVER_HALF_EXTENTS)
    for index, (radius, azimuth) in enumerate(_mover_slots(rng, spec.n_movers)):
        center = np.array([
            radius * np.cos(azimuth), radius * np.sin(azimuth), MOVER_HEIGHT,
        ])
        body = rng.uniform(-half, half, size=(spec.points_per_mover, 3))
        chunks.append(center + body)
        labels.append(np.full(spec.points_per_mover, index + 1, dtype=np.int64))
        speed = _mover_speed(radius, spec.mover_speed_range)
        tangent = np.array([-np.sin(azimuth), np.cos(azimuth), 0.0])
        shifts.append(speed * tangent)

    source_points = np.vstack(chunks)
    gt_labels = np.concatenate(labels)

    moved = source_points.copy()
    for index, shift in enumerate(shifts):
        moved[gt_labels == index + 1] += shift
    target_points = spec.ego_motion.apply(moved)
    gt_flow = target_points - source_points
    if spec.noise_sigma > 0:
        target_points = target_points + rng.normal(
            0.0, spec.noise_sigma, size=target_points.shape
        )

    source = PointCloud(source_points, frame_index=0,
                        gt_labels=gt_labels, gt_flow=gt_flow)
    target = PointCloud(target_points, frame_index=1, gt_labels=gt_labels)
    return FramePair(source, target, ego_pose_hint=spec.ego_motion)
