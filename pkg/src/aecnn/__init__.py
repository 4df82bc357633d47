"""Rotation-invariant point cloud learning with aligned edge convolutions.

The package is organized bottom up:

- geometry:  point cloud container, rotations, normalization, augmentation
- neighbors: kd-tree searches, farthest point sampling, feature-space kNN
- lrf:       per-point local reference frames and rotation-invariant coords
- autodiff:  minimal reverse-mode engine over float64 arrays
- nn:        shared MLPs, Adam, step schedule, binary checkpoints
- config:    dataclass configs with validation and INI round trips
- network:   the hierarchical classifier/segmenter built from all the above
- data:      synthetic shape datasets, file formats, evaluation metrics
- training:  deterministic epoch loop with bit-exact resume
- cli:       `aecnn` command line (train / eval / invariance-audit / ...)

The names re-exported here are the stable surface; module-level imports
(`from aecnn import lrf`) remain available for everything else.
"""
from aecnn.config import (
    ConfigError,
    NetworkConfig,
    SaFirstConfig,
    SaNextConfig,
    TrainConfig,
    desk_classification_config,
    desk_segmentation_config,
    load_config,
    paper_scale_config,
    save_config,
)
from aecnn.data import (
    Dataset,
    FileFormatError,
    Metrics,
    evaluate_classification,
    evaluate_miou,
    load_dataset_bin,
    load_xyz,
    protocol_rotation,
    save_dataset_bin,
    save_xyz,
    synth_classification,
    synth_segmentation,
)
from aecnn.geometry import PointCloud, normalize, rodrigues, sample_arbitrary_rotation
from aecnn.lrf import (
    AnchorStrategy,
    Lrf,
    RirPoint,
    compute_lrf,
    compute_lrf_batch,
    relative_rotation,
    rir,
    rir_batch,
)
from aecnn.neighbors import (
    ball_query,
    build_index,
    farthest_point_sampling,
    knn,
    knn_feature_graph,
)
from aecnn.network import (
    AlignVariant,
    Model,
    align_feature,
    aligned_edge_conv,
    classify,
    count_operations,
    count_parameters,
    feature_propagation,
    sa_first,
    sa_next,
    segment,
)
from aecnn.nn import Mlp, load_checkpoint, save_checkpoint
from aecnn.training import (
    EpochStats,
    RunRecord,
    predict_parts,
    train_classifier,
    train_segmenter,
)

__version__ = "0.1.0"

__all__ = [
    "AlignVariant",
    "AnchorStrategy",
    "ConfigError",
    "Dataset",
    "EpochStats",
    "FileFormatError",
    "Lrf",
    "Metrics",
    "Mlp",
    "Model",
    "NetworkConfig",
    "PointCloud",
    "RirPoint",
    "RunRecord",
    "SaFirstConfig",
    "SaNextConfig",
    "TrainConfig",
    "align_feature",
    "aligned_edge_conv",
    "ball_query",
    "build_index",
    "classify",
    "compute_lrf",
    "compute_lrf_batch",
    "count_operations",
    "count_parameters",
    "desk_classification_config",
    "desk_segmentation_config",
    "evaluate_classification",
    "evaluate_miou",
    "farthest_point_sampling",
    "feature_propagation",
    "knn",
    "knn_feature_graph",
    "load_checkpoint",
    "load_config",
    "load_dataset_bin",
    "load_xyz",
    "normalize",
    "paper_scale_config",
    "predict_parts",
    "protocol_rotation",
    "relative_rotation",
    "rir",
    "rir_batch",
    "rodrigues",
    "sa_first",
    "sa_next",
    "sample_arbitrary_rotation",
    "save_checkpoint",
    "save_config",
    "save_dataset_bin",
    "save_xyz",
    "segment",
    "synth_classification",
    "synth_segmentation",
    "train_classifier",
    "train_segmenter",
]
