"""Desk-scale detection transformer with one-to-many matching by feature augmentation."""

from .augmentation import AugPlan, Projector, feataug_crop, feataug_fc, feataug_flip, roialign, roialign_crop
from .boxes import Box, GroundTruthSet, SpatialTransform, giou, iou, transform_boxes
from .data import APReport, Dataset, DetectionRecord, SceneSpec, desk_benchmark, evaluate_ap, generate
from .estimator import DETRDetector
from .exceptions import (
    ConfigurationError,
    DatasetFormatError,
    DeskDetrError,
    DimensionError,
    GenerationError,
    NumericError,
    ParameterError,
    TrainingDivergedError,
)
from .matching import LossWeights, brute_force_assign, hungarian
from .model import DETR, ModelConfig
from .train import MatchRegime, MetricLog, pilot_study, query_stats

__version__ = "0.1.0"

__all__ = [
    "APReport", "AugPlan", "Box", "ConfigurationError", "DETR", "DETRDetector", "Dataset", "DatasetFormatError",
    "DeskDetrError", "DetectionRecord", "DimensionError", "GenerationError", "GroundTruthSet", "LossWeights",
    "MatchRegime", "MetricLog", "ModelConfig", "NumericError", "ParameterError", "Projector", "SceneSpec",
    "SpatialTransform", "TrainingDivergedError", "brute_force_assign", "desk_benchmark", "evaluate_ap",
    "feataug_crop", "feataug_fc", "feataug_flip", "generate", "giou", "hungarian", "iou", "pilot_study",
    "query_stats", "roialign", "roialign_crop", "transform_boxes",
]
