"""Trainable feature extraction: the matching loss, a small multi-scale
convolutional extractor with exact reverse-mode gradients, and the trainer."""

from .loss import LossWeights, TrainingPair, matching_loss, deep_supervised_loss
from .extractor import (ExtractorConfig, ExtractorParams, init_extractor,
                        extractor_forward, extractor_backward,
                        save_extractor, load_extractor)
from .train import TrainConfig, TrainResult, train, save_history_csv

__all__ = [
    "LossWeights", "TrainingPair", "matching_loss", "deep_supervised_loss",
    "ExtractorConfig", "ExtractorParams", "init_extractor",
    "extractor_forward", "extractor_backward", "save_extractor", "load_extractor",
    "TrainConfig", "TrainResult", "train", "save_history_csv",
]
