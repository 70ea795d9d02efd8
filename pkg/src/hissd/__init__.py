"""Offline multi-task multi-agent skill learning on a desk-scale battle grid."""

from .gridbattle import TaskSpec
from .losses import LossConfig
from .nets import NetConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "TaskSpec",
    "LossConfig",
    "NetConfig",
    "TrainConfig",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
