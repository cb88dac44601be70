"""Dual-path multi-stage networks for keypoint heatmap and part-affinity-field regression."""

from .config import NetworkConfig, RunConfig
from .posenet import PoseNetwork, StageOutput
from .tensor import Tensor

__all__ = ["NetworkConfig", "RunConfig", "PoseNetwork", "StageOutput", "Tensor"]
__version__ = "0.1.0"
