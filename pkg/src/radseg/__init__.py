"""Segmentation decoder with bottleneck token refinement, point refinement and boundary losses."""

from .config import RunConfig
from .data import SceneSpec, generate
from .model import VARIANTS, Ablation, SegModel

__all__ = ["RunConfig", "SceneSpec", "generate", "Ablation", "SegModel", "VARIANTS"]
__version__ = "0.1.0"
