"""Moment retrieval with importance-weighted multi-granularity audio-visual fusion."""
from .config import ImportanceConfig, LossWeights, ModelConfig, SyntheticSpec
from .model import IMGModel

__all__ = ["ImportanceConfig", "LossWeights", "ModelConfig", "SyntheticSpec", "IMGModel"]
__version__ = "0.1.0"
