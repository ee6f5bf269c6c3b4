"""Flow and segmentation evaluation.

Flow error splits points three ways by ground truth: background (label 0),
foreground static (speed at most 0.05 m per frame), and foreground dynamic
(speed strictly above). Each bucket reports the mean endpoint error inside
the 100 m x 100 m evaluation crop; empty buckets report 0 and set a flag
instead of producing NaN.

Segmentation compares two instance labelings (0 = background). Predicted
and ground-truth instances are matched greedily by descending IoU at
threshold 0.5, ties broken by lower pred then gt id. The Rand index treats
background as one group and is exact up to 2000 points, sampled with a
fixed seed above that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LengthMismatch

SPEED_THRESHOLD = 0.05
EVAL_HALF_EXTENT = 50.0
MATCH_IOU = 0.5
RI_EXACT_LIMIT = 2000
RI_SAMPLE_PAIRS = 200_000


@dataclass(frozen=True)
class EpeReport:
    """Mean endpoint error per bucket; flags mark buckets with no points."""

    bs: float
    fs: float
    fd: float
    three_way: float
    bs_empty: bool = False
    fs_empty: bool = False
    fd_empty: bool = False

    def to_dict(self) -> dict:
        return {
            "bs": self.bs, "fs": self.fs, "fd": self.fd,
            "three_way": self.three_way,
            "bs_empty": self.bs_empty, "fs_empty": self.fs_empty,
            "fd_empty": self.fd_empty,
        }


@dataclass(frozen=True)
class SegReport:
    ap: float
    pq: float
    f1: float
    precision: float
    recall: float
    miou: float
    ri: float

    def to_dict(self) -> dict:
        return {
            "ap": self.ap, "pq": self.pq, "f1": self.f1,
            "precision": self.precision, "recall": self.recall,
            "miou": self.miou, "ri": self.ri,
        }


def _as_array(obj, attr, dtype):
    return np.ascontiguousarray(getattr(obj, attr, obj), dtype=dtype)


def epe_3way(points, pred, gt_flow, gt_labels,
             eval_half_extent: float = EVAL_HALF_EXTENT) -> EpeReport:
    """Three-way endpoint error inside the square evaluation region.

    ``points`` locate each vector for the crop (|x|, |y| <= half extent,
    boundary included). Speeds compare squared so a ground-truth magnitude
    of exactly 0.05 stays in the static bucket.
    """
    pts = _as_array(points, "points", np.float64)
    vec = _as_array(pred, "vectors", np.float64)
    gt = np.ascontiguousarray(gt_flow, dtype=np.float64)
    labels = np.ascontiguousarray(gt_labels, dtype=np.int64)
    n = len(pts)
    if not (len(vec) == len(gt) == len(labels) == n):
        raise LengthMismatch(
            f"points {n}, pred {len(vec)}, gt_flow {len(gt)}, "
            f"gt_labels {len(labels)} lengths differ"
        )
    keep = (np.abs(pts[:, 0]) <= eval_half_extent) & (
        np.abs(pts[:, 1]) <= eval_half_extent
    )
    vec, gt, labels = vec[keep], gt[keep], labels[keep]

    err = np.linalg.norm(vec - gt, axis=1)
    speed_sq = (gt * gt).sum(axis=1)
    dynamic = speed_sq > SPEED_THRESHOLD * SPEED_THRESHOLD
    buckets = {
        "bs": labels == 0,
        "fs": (labels > 0) & ~dynamic,
        "fd": (labels > 0) & dynamic,
    }
    means = {}
    empty = {}
    for name, mask in buckets.items():
        empty[name] = not mask.any()
        means[name] = 0.0 if empty[name] else float(err[mask].mean())
    three_way = (means["bs"] + means["fs"] + means["fd"]) / 3.0
    return EpeReport(means["bs"], means["fs"], means["fd"], three_way,
                     empty["bs"], empty["fs"], empty["fd"])


def _contingency(pred: np.ndarray, gt: np.ndarray):
    """Unique (pred, gt) label pairs with joint counts, plus marginals."""
    pairs = np.stack([pred, gt], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    pred_ids, pred_counts = np.unique(pred, return_counts=True)
    gt_ids, gt_counts = np.unique(gt, return_counts=True)
    return (uniq, counts, dict(zip(pred_ids.tolist(), pred_counts.tolist())),
            dict(zip(gt_ids.tolist(), gt_counts.tolist())))


def _greedy_matches(pred: np.ndarray, gt: np.ndarray):
    """Instance pairs (pred_id, gt_id, iou) accepted at the IoU threshold."""
    uniq, counts, pred_sizes, gt_sizes = _contingency(pred, gt)
    candidates = []
    for (p, g), inter in zip(uniq.tolist(), counts.tolist()):
        if p <= 0 or g <= 0:
            continue
        union = pred_sizes[p] + gt_sizes[g] - inter
        iou = inter / union
        if iou >= MATCH_IOU:
            candidates.append((-iou, p, g))
    candidates.sort()
    used_p, used_g = set(), set()
    matches = []
    for neg_iou, p, g in candidates:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        matches.append((p, g, -neg_iou))
    n_pred = sum(1 for p in pred_sizes if p > 0)
    n_gt = sum(1 for g in gt_sizes if g > 0)
    return matches, n_pred, n_gt


def _background_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = int(((pred == 0) & (gt == 0)).sum())
    union = int(((pred == 0) | (gt == 0)).sum())
    return 1.0 if union == 0 else inter / union


def _ri_exact(pred: np.ndarray, gt: np.ndarray) -> float:
    """Closed-form Rand index over all point pairs via the contingency table."""
    n = len(pred)
    if n < 2:
        return 1.0
    uniq, counts, pred_sizes, gt_sizes = _contingency(pred, gt)

    def pairs2(values):
        return sum(v * (v - 1) // 2 for v in values)

    total = n * (n - 1) // 2
    both = pairs2(counts.tolist())
    same_pred = pairs2(pred_sizes.values())
    same_gt = pairs2(gt_sizes.values())
    agree = total + 2 * both - same_pred - same_gt
    return agree / total


def _ri_sampled(pred: np.ndarray, gt: np.ndarray,
                n_pairs: int = RI_SAMPLE_PAIRS, seed: int = 0) -> float:
    n = len(pred)
    if n < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = (i + 1 + rng.integers(0, n - 1, size=n_pairs)) % n
    agree = (pred[i] == pred[j]) == (gt[i] == gt[j])
    return float(agree.mean())


def rand_index(pred, gt, exact_limit: int = RI_EXACT_LIMIT) -> float:
    pred = np.ascontiguousarray(getattr(pred, "labels", pred), dtype=np.int64)
    gt = np.ascontiguousarray(getattr(gt, "labels", gt), dtype=np.int64)
    if len(pred) != len(gt):
        raise LengthMismatch(f"pred {len(pred)} vs gt {len(gt)} labels")
    if len(pred) <= exact_limit:
        return _ri_exact(pred, gt)
    return _ri_sampled(pred, gt)


def seg_metrics(pred_labels, gt_labels) -> SegReport:
    """Instance-level scores for one frame's predicted vs true labeling."""
    pred = np.ascontiguousarray(getattr(pred_labels, "labels", pred_labels),
                                dtype=np.int64)
    gt = np.ascontiguousarray(getattr(gt_labels, "labels", gt_labels),
                              dtype=np.int64)
    if len(pred) != len(gt):
        raise LengthMismatch(f"pred {len(pred)} vs gt {len(gt)} labels")

    matches, n_pred, n_gt = _greedy_matches(pred, gt)
    tp = len(matches)
    fp = n_pred - tp
    fn = n_gt - tp
    iou_sum = sum(iou for _, _, iou in matches)

    if n_pred > 0:
        precision = tp / n_pred
    else:
        precision = 1.0 if n_gt == 0 else 0.0
    if n_gt > 0:
        recall = tp / n_gt
    else:
        recall = 1.0 if n_pred == 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    denom = tp + fp / 2 + fn / 2
    pq = iou_sum / denom if denom else (1.0 if n_pred == n_gt == 0 else 0.0)
    # Matches enumerated by descending IoU each hold precision 1 at their
    # recall step, so the area under that curve collapses to tp / n_gt.
    if n_gt > 0:
        ap = tp / n_gt
    else:
        ap = 1.0 if n_pred == 0 else 0.0
    miou = float(np.mean([iou for _, _, iou in matches] + [_background_iou(pred, gt)]))
    ri = rand_index(pred, gt)
    return SegReport(ap, pq, f1, precision, recall, miou, ri)
