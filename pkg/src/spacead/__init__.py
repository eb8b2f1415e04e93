"""Student-teacher anomaly detection with spatial-consistency training.

A trainable, scorable, evaluable toolkit: dataset loading/synthesis,
augmentation views, the four networks, the gated consistency and
reconstruction losses, the training loop, anomaly-map scoring with validation
calibration, metrics, a scikit-learn style estimator, and a CLI.
"""

from .augment import AugmentSpec, color_jitter, strong_augment, weak_augment
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import (
    DatasetSplit,
    ImageSample,
    export_mvtec_layout,
    load_mvtec_layout,
    synth_toy_dataset,
    to_model_input,
)
from .errors import ConfigError, ItemError, SpaceError, TrainingDiverged
from .estimator import SpaceDetector
from .losses import (
    CriterionState,
    LossBundle,
    SclIntermediates,
    build_masks,
    logical_losses,
    masked_mean,
    quantile,
    scl_losses,
    sq_diff,
    stop_gradient,
    total_loss,
    update_criterion,
)
from .metrics import auroc, evaluate_split, pixel_auroc, spro_auc
from .networks import (
    NetworkConfig,
    SpaceModel,
    TeacherStats,
    compute_teacher_stats,
    feature_spatial,
    normalize_teacher,
)
from .scoring import (
    AnomalyMap,
    CalibrationStats,
    calibrate,
    image_score,
    map_logical,
    map_structural,
    map_total,
    normalize_map,
    read_spmap,
    score_image,
    write_heatmap_png,
    write_spmap,
)
from .trainer import TrainConfig, Trainer, lambda1_at, train

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "AugmentSpec",
    "CalibrationStats",
    "Checkpoint",
    "ConfigError",
    "CriterionState",
    "DatasetSplit",
    "ImageSample",
    "ItemError",
    "LossBundle",
    "NetworkConfig",
    "SclIntermediates",
    "SpaceDetector",
    "SpaceError",
    "SpaceModel",
    "TeacherStats",
    "TrainConfig",
    "Trainer",
    "TrainingDiverged",
    "auroc",
    "build_masks",
    "calibrate",
    "color_jitter",
    "compute_teacher_stats",
    "evaluate_split",
    "export_mvtec_layout",
    "feature_spatial",
    "image_score",
    "lambda1_at",
    "load_checkpoint",
    "load_mvtec_layout",
    "logical_losses",
    "map_logical",
    "map_structural",
    "map_total",
    "masked_mean",
    "normalize_map",
    "normalize_teacher",
    "pixel_auroc",
    "quantile",
    "read_spmap",
    "save_checkpoint",
    "scl_losses",
    "score_image",
    "spro_auc",
    "sq_diff",
    "stop_gradient",
    "strong_augment",
    "synth_toy_dataset",
    "to_model_input",
    "total_loss",
    "train",
    "update_criterion",
    "weak_augment",
    "write_heatmap_png",
    "write_spmap",
]
