"""Quaternion GAN layers and latent-space color-image inpainting."""

from ._kernels import BACKEND
from .gan import QGAN, TrainConfig, train
from .inpaint import InpaintConfig
from .qalgebra import PureQuaternion, Quaternion, RotationParams

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "QGAN",
    "TrainConfig",
    "train",
    "InpaintConfig",
    "PureQuaternion",
    "Quaternion",
    "RotationParams",
]
