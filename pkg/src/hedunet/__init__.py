"""HED-UNet joint coastline segmentation and edge detection on a small numpy autodiff engine."""
from .model import HEDUNet, ModelConfig, PredictionBundle, build, forward, load_checkpoint, save_checkpoint, theoretical_rf
from .synthdata import GenParams, Scene, generate_scene
from .tensor import Tensor, no_grad
from .training import TrainConfig, balanced_bce, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "GenParams", "HEDUNet", "ModelConfig", "PredictionBundle", "Scene", "Tensor", "TrainConfig",
    "balanced_bce", "build", "forward", "generate_scene", "load_checkpoint", "no_grad",
    "save_checkpoint", "theoretical_rf", "total_loss", "train",
]
