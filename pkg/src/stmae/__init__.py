"""Siamese transition masked autoencoder (ST-MAE) for visual anomaly detection.

Images pass through a frozen CNN whose multi-level activations are fused into
one dense feature map. The map is cut into patch tokens, split at random into
two halves, and each half is encoded by a shared transformer. The halves swap
positions before a small decoder reconstructs the map, so every token has to
be predicted from the other half. Feature residuals give the anomaly map.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, CheckpointVersionError, ConfigError, InvalidInputError,
                     STMAEError, TrainingDivergedError, UndefinedMetricError)
from .evaluation import MetricsReport, evaluate_category
from .lpsr import ExtractorConfig, FeatureExtractor
from .model import STMAE, ModelConfig
from .residuals import postprocess, total_loss
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "__version__", "STMAE", "ModelConfig", "ExtractorConfig", "FeatureExtractor", "TrainConfig",
    "train", "save_checkpoint", "load_checkpoint", "evaluate_category", "MetricsReport",
    "total_loss", "postprocess", "STMAEError", "ConfigError", "InvalidInputError",
    "UndefinedMetricError", "CheckpointError", "CheckpointVersionError", "TrainingDivergedError",
]
