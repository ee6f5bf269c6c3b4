"""Self-supervised scene flow and moving-instance segmentation for point-cloud pairs."""

from .coarse import (
    DynamicMask,
    ClusterSet,
    PseudoLabels,
    assemble_pseudo_labels,
    cluster_dynamic,
    raycast_dynamic_mask,
    temporal_refine,
)
from .data import (
    FlowField,
    FramePair,
    MaskLogits,
    PointCloud,
    combine_flow,
    crop_to_eval_region,
    read_frame,
    write_frame,
)
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import EpeReport, SegReport, epe_3way, rand_index, seg_metrics
from .model import ModelParams, backward, forward, predict_labels
from .neighbors import (
    COMPILED,
    NeighborQueryConfig,
    VoxelGrid,
    ball_query,
    build_voxel_grid,
    knn,
    nearest_neighbors,
)
from .rigid import RigidTransform, ego_flow, icp_ego_motion, kabsch_align
from .synth import SceneSpec, generate_pair
from .train import (
    DivergenceDetected,
    TrainConfig,
    ablate,
    evaluate,
    infer,
    label_pair,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "COMPILED",
    "DivergenceDetected",
    "DynamicMask",
    "EpeReport",
    "FlowField",
    "FramePair",
    "ClusterSet",
    "LossBreakdown",
    "LossWeights",
    "MaskLogits",
    "ModelParams",
    "NeighborQueryConfig",
    "PointCloud",
    "PseudoLabels",
    "RigidTransform",
    "SceneSpec",
    "SegReport",
    "TrainConfig",
    "VoxelGrid",
    "__version__",
    "ablate",
    "assemble_pseudo_labels",
    "backward",
    "ball_query",
    "build_voxel_grid",
    "cluster_dynamic",
    "combine_flow",
    "crop_to_eval_region",
    "ego_flow",
    "epe_3way",
    "evaluate",
    "forward",
    "generate_pair",
    "icp_ego_motion",
    "infer",
    "kabsch_align",
    "knn",
    "label_pair",
    "nearest_neighbors",
    "predict_labels",
    "rand_index",
    "raycast_dynamic_mask",
    "read_frame",
    "seg_metrics",
    "temporal_refine",
    "total_loss",
    "train",
    "write_frame",
]
