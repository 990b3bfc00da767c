"""Desk-scale RGBD image synthesis with a dual-path generator and a switchable discriminator."""

from .camera import CameraIntrinsics, RotationSpec, backward_warp, intrinsics_from_focal, unproject
from .config import ConfigError, RunConfig, resolve_config
from .discriminator import SwitchableDiscriminator
from .estimator import DepthGAN
from .generator import DualPathGenerator, LatentPair
from .training import Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConfigError",
    "DepthGAN",
    "DualPathGenerator",
    "LatentPair",
    "RotationSpec",
    "RunConfig",
    "SwitchableDiscriminator",
    "Trainer",
    "backward_warp",
    "intrinsics_from_focal",
    "load_checkpoint",
    "resolve_config",
    "save_checkpoint",
    "unproject",
]
