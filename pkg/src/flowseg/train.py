"""Training loop, inference pipeline, and the loss-ablation grid.

Training follows a fixed recipe: pseudo-labels and ego motion are
computed once per pair before the first epoch (they depend only on the
input clouds), then each epoch walks the pairs in order, runs the
network forward, assembles total flow as ego flow plus the predicted
residual, and applies one plain gradient-descent step per pair. No
optimizer state exists, so a run is a pure function of config and data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .coarse import (
    DEFAULT_EPS,
    DEFAULT_MATCH_RADIUS,
    DEFAULT_MIN_PTS,
    DEFAULT_RATIO_THRESHOLD,
    ClusterSet,
    DynamicMask,
    PseudoLabels,
    assemble_pseudo_labels,
    cluster_dynamic,
    raycast_dynamic_mask,
    temporal_refine,
)
from .data import FlowField, FramePair, MaskLogits, PointCloud, combine_flow
from .losses import LossWeights, total_loss
from .metrics import EpeReport, SegReport, epe_3way, seg_metrics
from .model import (
    DEFAULT_CELL,
    DEFAULT_CHANNELS,
    DEFAULT_ITERS,
    DEFAULT_WIDTH,
    ModelParams,
    backward,
    forward,
    predict_labels,
)
from .neighbors import VoxelGrid
from .rigid import RigidTransform, ego_flow, icp_ego_motion

LOSS_CSV_HEADER = "epoch,loss_total,loss_cd,loss_bf,loss_rigid,loss_smc,loss_dom"
DIVERGENCE_LIMIT = 1e6
DEFAULT_LEARNING_RATE = 0.05


class DivergenceDetected(RuntimeError):
    """Training loss crossed the runaway threshold."""


@dataclass(frozen=True)
class TrainConfig:
    """Run recipe: optimization, model dims, and coarse-labeler knobs."""

    epochs: int = 20
    learning_rate: float = DEFAULT_LEARNING_RATE
    weights: LossWeights = field(default_factory=LossWeights)
    width: int = DEFAULT_WIDTH
    k_iters: int = DEFAULT_ITERS
    channels: int = DEFAULT_CHANNELS
    cell_size: float = DEFAULT_CELL
    ratio_threshold: float = DEFAULT_RATIO_THRESHOLD
    eps: float = DEFAULT_EPS
    min_pts: int = DEFAULT_MIN_PTS
    match_radius: float = DEFAULT_MATCH_RADIUS
    seed: int = 0
    shuffle: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        # Zero is allowed: it is the documented no-op run.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        blob = {}
        for spec in fields(self):
            value = getattr(self, spec.name)
            if spec.name == "weights":
                value = {w.name: getattr(value, w.name) for w in fields(value)}
            blob[spec.name] = value
        return blob

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        known = {spec.name for spec in fields(cls)}
        unknown = set(blob) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values = dict(blob)
        if "weights" in values:
            values["weights"] = LossWeights(**values["weights"])
        return cls(**values)


@dataclass(frozen=True)
class EpochStats:
    """Per-epoch mean of the weighted total and the raw term values."""

    epoch: int
    total: float
    cd: float
    bf: float
    rigid: float
    smc: float
    dom: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.total!r},{self.cd!r},{self.bf!r},"
                f"{self.rigid!r},{self.smc!r},{self.dom!r}")


def write_loss_curve(curve, path) -> None:
    lines = [LOSS_CSV_HEADER] + [stats.csv_row() for stats in curve]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_loss_curve(path):
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or lines[0] != LOSS_CSV_HEADER:
        raise ValueError(f"unexpected loss-curve header in {path}")
    curve = []
    for line in lines[1:]:
        cells = line.split(",")
        curve.append(EpochStats(int(cells[0]), *(float(c) for c in cells[1:])))
    return curve


@dataclass
class PairData:
    """Everything about one pair that epochs reuse unchanged."""

    pair: FramePair
    grid: VoxelGrid
    pseudo: PseudoLabels
    ego: RigidTransform
    f_ego: FlowField


def _reversed_pair(pair: FramePair) -> FramePair:
    """Swap roles so the target frame gets its own dynamic mask."""
    src = PointCloud(pair.target.points, frame_index=0)
    dst = PointCloud(pair.source.points, frame_index=1)
    hint = pair.ego_pose_hint.inverse() if pair.ego_pose_hint else None
    return FramePair(src, dst, ego_pose_hint=hint)


def label_pair(pair: FramePair,
               ratio_threshold: float = DEFAULT_RATIO_THRESHOLD,
               eps: float = DEFAULT_EPS,
               min_pts: int = DEFAULT_MIN_PTS,
               match_radius: float = DEFAULT_MATCH_RADIUS):
    """Coarse pseudo-labels for the source frame.

    Returns (labels, source mask, target mask); the masks also feed the
    static split for ego estimation.
    """
    mask_src = raycast_dynamic_mask(pair, ratio_threshold=ratio_threshold)
    mask_tgt = raycast_dynamic_mask(_reversed_pair(pair),
                                    ratio_threshold=ratio_threshold)
    clusters_src = cluster_dynamic(pair.source, mask_src, eps, min_pts)
    clusters_tgt = cluster_dynamic(pair.target, mask_tgt, eps, min_pts)
    if pair.ego_pose_hint is not None:
        # Cross-frame matching must see ego-compensated geometry; otherwise
        # the sensor's own displacement eats into match_radius and fast
        # objects lose their clusters whenever they move along the ego path.
        aligned = ClusterSet(pair.ego_pose_hint.apply(pair.source.points),
                             clusters_src.assignments, eps, min_pts)
    else:
        aligned = clusters_src
    refined = temporal_refine(None, aligned, clusters_tgt, match_radius)
    pseudo = assemble_pseudo_labels(mask_src, refined)
    return pseudo, mask_src, mask_tgt


def estimate_ego(pair: FramePair, mask_src: DynamicMask,
                 mask_tgt: DynamicMask) -> RigidTransform:
    static_src = pair.source.points[~mask_src.flags]
    static_tgt = pair.target.points[~mask_tgt.flags]
    return icp_ego_motion(static_src, static_tgt)


def prepare_pair(pair: FramePair, cfg: TrainConfig) -> PairData:
    pseudo, mask_src, mask_tgt = label_pair(
        pair, cfg.ratio_threshold, cfg.eps, cfg.min_pts, cfg.match_radius
    )
    ego = estimate_ego(pair, mask_src, mask_tgt)
    f_ego = ego_flow(pair.source, ego)
    grid = VoxelGrid(pair.source, cfg.cell_size)
    return PairData(pair, grid, pseudo, ego, f_ego)


def train(pairs, cfg: TrainConfig | None = None):
    """Fit a model on the pairs; returns (params, per-epoch loss curve)."""
    cfg = cfg or TrainConfig()
    if len(pairs) == 0:
        raise ValueError("train needs at least one pair")
    prep = [prepare_pair(pair, cfg) for pair in pairs]
    params = ModelParams.init(d=cfg.width, k_iters=cfg.k_iters,
                              channels=cfg.channels, seed=cfg.seed,
                              cell_size=cfg.cell_size)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(prep)) if cfg.shuffle else range(len(prep))
        sums = np.zeros(6)
        for index in order:
            data = prep[index]
            residual, logits, trace = forward(params, data.pair.source, data.grid)
            flow = combine_flow(data.f_ego, residual)
            br = total_loss(data.pair.source, data.pair.target, flow, logits,
                            data.pseudo, weights=cfg.weights, grid=data.grid)
            if not np.isfinite(br.total) or br.total > DIVERGENCE_LIMIT:
                raise DivergenceDetected(
                    f"loss {br.total} on pair {index} in epoch {epoch}"
                )
            if cfg.learning_rate != 0.0:
                grads = backward(params, trace, br.grad_flow, br.grad_logits)
                for name, grad in grads.tensors.items():
                    params.tensors[name] -= cfg.learning_rate * grad
            sums += (br.total, br.chamfer, br.focal, br.rigid,
                     br.consistency, br.separation)
        means = sums / len(prep)
        curve.append(EpochStats(epoch, *(float(v) for v in means)))
    return params, curve


@dataclass(frozen=True)
class InferResult:
    total: FlowField
    residual: FlowField
    ego_field: FlowField
    logits: MaskLogits
    labels: PseudoLabels
    ego: RigidTransform


def infer(params: ModelParams, pair: FramePair,
          ratio_threshold: float = DEFAULT_RATIO_THRESHOLD) -> InferResult:
    """Full pipeline on one pair: static split, ICP ego, network residual."""
    mask_src = raycast_dynamic_mask(pair, ratio_threshold=ratio_threshold)
    mask_tgt = raycast_dynamic_mask(_reversed_pair(pair),
                                    ratio_threshold=ratio_threshold)
    ego = estimate_ego(pair, mask_src, mask_tgt)
    f_ego = ego_flow(pair.source, ego)
    grid = VoxelGrid(pair.source, params.cell_size)
    residual, logits, _ = forward(params, pair.source, grid)
    total = combine_flow(f_ego, residual)
    labels = predict_labels(logits)
    return InferResult(total, residual, f_ego, logits, labels, ego)


def evaluate(params: ModelParams, pairs):
    """Per-pair flow and segmentation reports against carried ground truth."""
    epes, segs = [], []
    for pair in pairs:
        out = infer(params, pair)
        epes.append(epe_3way(pair.source.points, out.total,
                             pair.source.gt_flow, pair.source.gt_labels))
        segs.append(seg_metrics(out.labels.labels, pair.source.gt_labels))
    return epes, segs


def mean_epe(reports) -> EpeReport:
    bs = float(np.mean([r.bs for r in reports]))
    fs = float(np.mean([r.fs for r in reports]))
    fd = float(np.mean([r.fd for r in reports]))
    return EpeReport(bs, fs, fd, (bs + fs + fd) / 3.0,
                     all(r.bs_empty for r in reports),
                     all(r.fs_empty for r in reports),
                     all(r.fd_empty for r in reports))


def mean_seg(reports) -> SegReport:
    values = {
        name: float(np.mean([getattr(r, name) for r in reports]))
        for name in ("ap", "pq", "f1", "precision", "recall", "miou", "ri")
    }
    return SegReport(**values)


ABLATION_ROWS = (
    ("cd", ("lambda_bf", "lambda_rigid", "lambda_smc", "lambda_dom")),
    ("cd+bf", ("lambda_rigid", "lambda_smc", "lambda_dom")),
    ("cd+bf+rigid", ("lambda_smc", "lambda_dom")),
    ("cd+bf+rigid+smc", ("lambda_dom",)),
    ("cd+bf+rigid+smc+dom", ()),
)


def ablate(train_pairs, eval_pairs, cfg: TrainConfig | None = None):
    """Cumulative loss-term grid: train each row, report held-out EPE."""
    cfg = cfg or TrainConfig()
    rows = []
    for name, zeroed in ABLATION_ROWS:
        weights = replace(cfg.weights, **{key: 0.0 for key in zeroed})
        params, _ = train(train_pairs, replace(cfg, weights=weights))
        epes, _ = evaluate(params, eval_pairs)
        report = mean_epe(epes)
        rows.append({
            "row": name,
            "lambda_cd": weights.lambda_cd,
            "lambda_bf": weights.lambda_bf,
            "lambda_rigid": weights.lambda_rigid,
            "lambda_smc": weights.lambda_smc,
            "lambda_dom": weights.lambda_dom,
            "bs": report.bs,
            "fs": report.fs,
            "fd": report.fd,
            "three_way": report.three_way,
        })
    return rows
