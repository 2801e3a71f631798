"""Pixel-space flow-matching transformer with a masked representation-alignment branch."""

from .alignment import AlignmentBranch
from .backbone import JiT, ModelConfig, build_backbone
from .config import RunConfig
from .sampler import SamplerConfig, sample
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "AlignmentBranch", "JiT", "ModelConfig", "RunConfig", "SamplerConfig", "TrainConfig", "Trainer",
    "build_backbone", "load_checkpoint", "sample", "save_checkpoint",
]
__version__ = "0.1.0"
