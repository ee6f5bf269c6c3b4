"""Training objectives: value plus analytic gradient for each term.

Five scalar losses drive training. Chamfer distance aligns warped source
points with the target frame. A balanced focal term supervises the
background logit channel against pseudo-labels. A rigid term penalizes
per-instance flow that no single rigid motion explains. A neighborhood
consistency term pulls softmax mask rows of nearby points together, and a
separation term pushes rows of distant foreground points apart. Gradients
are exact: fitted rigid motions are treated as constants of the current
iterate (they minimize the residual, so the envelope theorem applies), and
nearest-neighbor assignments are held fixed where they are locally
constant.

Accumulation uses ``np.add.at`` and fixed pair enumeration orders, so every
value and gradient is bit-reproducible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .coarse import PseudoLabels
from .data import FlowField, LengthMismatch, MaskLogits, PointCloud
from .model import _sigmoid
from .neighbors import (
    EmptyCloud,
    NeighborQueryConfig,
    VoxelGrid,
    ball_batch,
    knn_batch,
    nearest_neighbors,
)
from .rigid import DegenerateConfigurationWarning, kabsch_align

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Term weights and per-term constants.

    Short lambda keys mirror the loss-curve CSV columns
    (cd, bf, rigid, smc, dom).
    """

    lambda_cd: float = 1.0
    lambda_bf: float = 1.0
    lambda_rigid: float = 1.0
    lambda_smc: float = 0.1
    lambda_dom: float = 0.1
    alpha: float = 1.0
    gamma: float = 2.0
    beta: float = 0.6
    w_knn: float = 0.5
    w_ball: float = 0.5
    delta: float = 2.0
    l_min: float = 1.0
    max_pairs: int = 4096

    def __post_init__(self):
        for name in ("lambda_cd", "lambda_bf", "lambda_rigid", "lambda_smc",
                     "lambda_dom", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.max_pairs < 1:
            raise ValueError(f"max_pairs must be >= 1, got {self.max_pairs}")


def _points_of(obj) -> np.ndarray:
    pts = getattr(obj, "points", obj)
    return np.ascontiguousarray(pts, dtype=np.float64)


def _vectors_of(obj) -> np.ndarray:
    vec = getattr(obj, "vectors", obj)
    return np.ascontiguousarray(vec, dtype=np.float64)


def _logits_of(obj) -> np.ndarray:
    m = getattr(obj, "logits", obj)
    return np.ascontiguousarray(m, dtype=np.float64)


def _labels_of(obj) -> np.ndarray:
    lab = getattr(obj, "labels", obj)
    return np.ascontiguousarray(lab, dtype=np.int64)


def _auto_cell(pts: np.ndarray) -> float:
    span = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return max(span / 50.0, 1e-3)


def _softmax(m: np.ndarray) -> np.ndarray:
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softmax_chain(s: np.ndarray, grad_s: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax rows back to the underlying logits."""
    return s * (grad_s - (grad_s * s).sum(axis=1, keepdims=True))


def chamfer_loss(warped, target):
    """Symmetric mean squared nearest-neighbor distance.

    Returns (value, gradient w.r.t. the warped points). The target cloud is
    treated as fixed; both correspondence directions contribute.
    """
    w = _points_of(warped)
    t = _points_of(target)
    if len(w) == 0 or len(t) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    idx_wt, d2_wt = nearest_neighbors(VoxelGrid(t, _auto_cell(t)), w)
    idx_tw, d2_tw = nearest_neighbors(VoxelGrid(w, _auto_cell(w)), t)
    value = 0.5 * (float(d2_wt.mean()) + float(d2_tw.mean()))
    grad = (w - t[idx_wt]) / len(w)
    np.add.at(grad, idx_tw, (w[idx_tw] - t) / len(t))
    return value, grad


def balanced_focal_loss(logits, pseudo, weights: LossWeights | None = None):
    """Focal loss on the background channel, balanced between classes.

    The background probability is the sigmoid of logit channel 0; a point's
    class target is foreground iff its pseudo-label is positive. Returns
    (value, gradient w.r.t. logits) where only channel 0 carries gradient.
    """
    weights = weights or LossWeights()
    m = _logits_of(logits)
    labels = _labels_of(pseudo)
    n = len(m)
    if len(labels) != n:
        raise LengthMismatch(f"{len(labels)} pseudo-labels for {n} logit rows")
    y = (labels > 0).astype(np.float64)
    s = _sigmoid(m[:, 0])
    p_bg = np.clip(s, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    p_fg = np.clip(1.0 - s, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    a, g, b = weights.alpha, weights.gamma, weights.beta

    def focal(p, target):
        return -a * target * (1.0 - p) ** g * np.log(p)

    def dfocal_dp(p, target):
        return -a * target * (
            (1.0 - p) ** g / p - g * (1.0 - p) ** (g - 1.0) * np.log(p)
        )

    value = float(np.mean(b * focal(p_fg, y) + (1.0 - b) * focal(p_bg, 1.0 - y)))
    ds = s * (1.0 - s)
    live_fg = (1.0 - s > _PROB_FLOOR) & (1.0 - s < 1.0 - _PROB_FLOOR)
    live_bg = (s > _PROB_FLOOR) & (s < 1.0 - _PROB_FLOOR)
    dm0 = (
        b * dfocal_dp(p_fg, y) * -ds * live_fg
        + (1.0 - b) * dfocal_dp(p_bg, 1.0 - y) * ds * live_bg
    ) / n
    grad = np.zeros_like(m)
    grad[:, 0] = dm0
    return value, grad


def rigid_loss(cloud, logits, flow):
    """Per-instance rigid-fit residual of the warped points.

    Points are grouped by argmax logit channel; each foreground group with
    at least three members is aligned to its warped positions by a fitted
    rigid motion, and the Frobenius norm of the remaining residual
    accumulates, normalized by N times the channel count. The fitted motion
    is a constant of the current iterate, which still yields the exact
    gradient because it minimizes the residual. Returns (value, gradient
    w.r.t. the flow vectors).
    """
    pts = _points_of(cloud)
    m = _logits_of(logits)
    vec = _vectors_of(flow)
    n, channels = m.shape
    if len(pts) != n or len(vec) != n:
        raise LengthMismatch(
            f"cloud {len(pts)}, logits {n}, flow {len(vec)} lengths differ"
        )
    labels = np.argmax(m, axis=1)
    warped = pts + vec
    value = 0.0
    grad = np.zeros_like(vec)
    for ch in range(1, channels):
        mask = labels == ch
        if mask.sum() < 3:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateConfigurationWarning)
            fit = kabsch_align(pts[mask], warped[mask])
        residual = fit.apply(pts[mask]) - warped[mask]
        fro = math.sqrt(float((residual * residual).sum()))
        value += fro
        # The norm's kink at zero: below float noise the normalized
        # direction is meaningless, so take the zero subgradient there.
        if fro > 1e-9:
            grad[mask] -= residual / fro
    scale = 1.0 / (n * channels)
    return value * scale, grad * scale


def mask_consistency_loss(cloud, logits, cfg: NeighborQueryConfig | None = None,
                          weights: LossWeights | None = None,
                          grid: VoxelGrid | None = None):
    """Squared softmax-row disagreement over local neighborhoods.

    Two neighborhood systems contribute per point: the nearest neighbors
    within the query radius (at most cfg.k of them) and the full closed
    ball. Returns (value, gradient w.r.t. logits). Pass a prebuilt grid
    with cell size cfg.radius to amortize indexing across calls.
    """
    cfg = cfg or NeighborQueryConfig()
    weights = weights or LossWeights()
    pts = _points_of(cloud)
    m = _logits_of(logits)
    n = len(pts)
    if len(m) != n:
        raise LengthMismatch(f"{len(m)} logit rows for {n} points")
    if n == 0:
        return 0.0, np.zeros_like(m)
    if grid is None:
        grid = VoxelGrid(pts, cfg.radius)

    src = []
    dst = []
    pair_w = []
    k_eff = min(cfg.k, n - 1)
    if k_eff >= 1:
        nbrs = knn_batch(grid, k_eff)
        qi = np.repeat(np.arange(n, dtype=np.int64), k_eff)
        qj = nbrs.ravel()
        d2 = ((pts[qi] - pts[qj]) ** 2).sum(axis=1)
        keep = d2 <= cfg.radius * cfg.radius
        src.append(qi[keep])
        dst.append(qj[keep])
        pair_w.append(np.full(int(keep.sum()), weights.w_knn))
    flat, counts = ball_batch(grid, cfg.radius)
    src.append(np.repeat(np.arange(n, dtype=np.int64), counts))
    dst.append(flat)
    pair_w.append(np.full(len(flat), weights.w_ball))
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    pair_w = np.concatenate(pair_w)
    if len(src) == 0:
        return 0.0, np.zeros_like(m)

    s = _softmax(m)
    diff = s[src] - s[dst]
    value = float((pair_w * (diff * diff).sum(axis=1)).sum() / n)
    grad_s = np.zeros_like(s)
    push = (2.0 / n) * pair_w[:, None] * diff
    np.add.at(grad_s, src, push)
    np.add.at(grad_s, dst, -push)
    return value, _softmax_chain(s, grad_s)


def mask_separation_loss(cloud, logits, weights: LossWeights | None = None):
    """Mean cosine similarity of softmax rows over distant foreground pairs.

    Pairs are foreground points (argmax channel > 0) strictly farther apart
    than weights.delta, enumerated in ascending (i, j) order and thinned to
    at most weights.max_pairs by a fixed stride. With no qualifying pairs
    the loss pins at weights.l_min with zero gradient. Returns (value,
    gradient w.r.t. logits).
    """
    weights = weights or LossWeights()
    pts = _points_of(cloud)
    m = _logits_of(logits)
    n = len(pts)
    if len(m) != n:
        raise LengthMismatch(f"{len(m)} logit rows for {n} points")
    fg = np.nonzero(np.argmax(m, axis=1) > 0)[0] if n else np.empty(0, np.int64)
    if len(fg) >= 2:
        ii, jj = np.triu_indices(len(fg), k=1)
        gi, gj = fg[ii], fg[jj]
        d2 = ((pts[gi] - pts[gj]) ** 2).sum(axis=1)
        keep = d2 > weights.delta * weights.delta
        gi, gj = gi[keep], gj[keep]
    else:
        gi = gj = np.empty(0, dtype=np.int64)
    if len(gi) == 0:
        return float(weights.l_min), np.zeros_like(m)
    if len(gi) > weights.max_pairs:
        stride = math.ceil(len(gi) / weights.max_pairs)
        gi, gj = gi[::stride], gj[::stride]
    count = len(gi)

    s = _softmax(m)
    a, bvec = s[gi], s[gj]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(bvec, axis=1)
    dot = (a * bvec).sum(axis=1)
    cos = dot / (na * nb)
    value = float(cos.mean())
    ga = (bvec / (na * nb)[:, None] - (cos / (na * na))[:, None] * a) / count
    gb = (a / (na * nb)[:, None] - (cos / (nb * nb))[:, None] * bvec) / count
    grad_s = np.zeros_like(s)
    np.add.at(grad_s, gi, ga)
    np.add.at(grad_s, gj, gb)
    return value, _softmax_chain(s, grad_s)


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted total plus raw per-term values and combined gradients."""

    total: float
    chamfer: float
    focal: float
    rigid: float
    consistency: float
    separation: float
    grad_flow: np.ndarray
    grad_logits: np.ndarray


def total_loss(source: PointCloud, target: PointCloud, flow_total: FlowField,
               logits: MaskLogits, pseudo: PseudoLabels,
               weights: LossWeights | None = None,
               cfg: NeighborQueryConfig | None = None,
               grid: VoxelGrid | None = None) -> LossBreakdown:
    """Weighted sum of the five terms with combined gradients.

    Terms whose weight is zero are skipped entirely and reported as 0.
    grad_flow collects the Chamfer and rigid paths; grad_logits collects
    the focal, consistency, and separation paths.
    """
    weights = weights or LossWeights()
    vec = _vectors_of(flow_total)
    m = _logits_of(logits)
    grad_flow = np.zeros_like(vec)
    grad_logits = np.zeros_like(m)
    values = {"cd": 0.0, "bf": 0.0, "rigid": 0.0, "smc": 0.0, "dom": 0.0}

    if weights.lambda_cd > 0:
        values["cd"], g = chamfer_loss(source.points + vec, target)
        grad_flow += weights.lambda_cd * g
    if weights.lambda_bf > 0:
        values["bf"], g = balanced_focal_loss(logits, pseudo, weights)
        grad_logits += weights.lambda_bf * g
    if weights.lambda_rigid > 0:
        values["rigid"], g = rigid_loss(source, logits, flow_total)
        grad_flow += weights.lambda_rigid * g
    if weights.lambda_smc > 0:
        values["smc"], g = mask_consistency_loss(source, logits, cfg, weights, grid)
        grad_logits += weights.lambda_smc * g
    if weights.lambda_dom > 0:
        values["dom"], g = mask_separation_loss(source, logits, weights)
        grad_logits += weights.lambda_dom * g

    total = (
        weights.lambda_cd * values["cd"]
        + weights.lambda_bf * values["bf"]
        + weights.lambda_rigid * values["rigid"]
        + weights.lambda_smc * values["smc"]
        + weights.lambda_dom * values["dom"]
    )
    return LossBreakdown(total, values["cd"], values["bf"], values["rigid"],
                         values["smc"], values["dom"], grad_flow, grad_logits)
