"""Learning with noisy labels by jointly training a classifier and a contrastive projection head."""

from .data import ImageDataset, TransitionMatrix, build_symmetric, corrupt_labels, generate_synthetic
from .errors import ColearnError, ConfigError, TrainingError
from .losses import LossConfig, total_loss
from .model import NetworkConfig, init_params
from .train import TrainConfig, run_training

__all__ = [
    "ColearnError", "ConfigError", "ImageDataset", "LossConfig", "NetworkConfig", "TrainConfig",
    "TrainingError", "TransitionMatrix", "build_symmetric", "corrupt_labels", "generate_synthetic",
    "init_params", "run_training", "total_loss",
]
__version__ = "0.1.0"
