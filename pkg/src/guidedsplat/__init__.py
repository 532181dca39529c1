"""Uncertainty-guided Gaussian splatting at desk scale.

A differentiable tile rasteriser with a hand-written backward pass, two
sources of per-pixel confidence for synthetic training views, the matching
losses, a sampling curriculum and a small optimisation loop.
"""

from .curriculum import ScheduleParams, sample_probability, sample_source, schedule_weight
from .losses import LossWeights, depth_weight, photometric_loss, synthetic_loss, total_loss
from .oracle import colorize, fuse_uncertainty, oracle_auroc, reprojection_oracle
from .rasterizer import RasterConfig, RenderOutput, render, render_backward
from .scene import (AttentionStack, Camera, GaussianCloud, PointSet, Role, SceneBundle, SceneError,
                    UncertaintyMap, ViewRecord, load_scene, save_scene)
from .tensorfile import read_tensor, write_tensor
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AttentionStack", "Camera", "GaussianCloud", "LossWeights", "PointSet", "RasterConfig", "RenderOutput",
    "Role", "SceneBundle", "SceneError", "ScheduleParams", "TrainConfig", "Trainer", "UncertaintyMap",
    "ViewRecord", "colorize", "depth_weight", "fuse_uncertainty", "load_scene", "oracle_auroc",
    "photometric_loss", "read_tensor", "render", "render_backward", "reprojection_oracle",
    "sample_probability", "sample_source", "save_scene", "schedule_weight", "synthetic_loss",
    "total_loss", "train", "write_tensor",
]
