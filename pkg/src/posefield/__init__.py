"""Root pose estimation for deforming objects: a per-frame rigid pose is
decomposed into a dense multi-level local similarity field and optimized
by non-rigid point registration against a shared canonical model.
"""

from .fields import ModelConfig, SceneModel
from .geometry import RigidTransform, Rotation, SimTransform
from .metrics import EvalResult, chamfer_distance_metric, fscore, miou
from .optimizer import TrainConfig, Trainer, register_pointclouds
from .scenes import LoadedScene, generate_scene

__all__ = [
    "EvalResult",
    "LoadedScene",
    "ModelConfig",
    "RigidTransform",
    "Rotation",
    "SceneModel",
    "SimTransform",
    "TrainConfig",
    "Trainer",
    "chamfer_distance_metric",
    "fscore",
    "generate_scene",
    "miou",
    "register_pointclouds",
]

__version__ = "0.1.0"
