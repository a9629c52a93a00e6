"""Desk-scale lab for source-free video segmentation adaptation."""

from .diffcore import Tensor, no_grad
from .segnet import ModelConfig, SegModel, load_checkpoint, save_checkpoint
from .synthvid import DomainSpec, VideoSequence, generate_sequence
from .trainer import TrainConfig, adapt_sfda, train_source

__all__ = [
    "Tensor", "no_grad",
    "ModelConfig", "SegModel", "load_checkpoint", "save_checkpoint",
    "DomainSpec", "VideoSequence", "generate_sequence",
    "TrainConfig", "adapt_sfda", "train_source",
]

__version__ = "0.1.0"
