"""Text-augmented medical image segmentation (Double-U CNN/ViT) in plain numpy."""

from .losses import LossConfig, dice_score, miou
from .model import LViT, LViTConfig
from .synth import SynthParams, generate_dataset, load_dataset
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "LViT",
    "LViTConfig",
    "LossConfig",
    "SynthParams",
    "TrainConfig",
    "dice_score",
    "fit",
    "generate_dataset",
    "load_dataset",
    "miou",
]
