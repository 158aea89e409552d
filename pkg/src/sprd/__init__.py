"""Toy-scale one-stage instance segmentation with single-pixel mask reconstruction."""
from .config import Config, micro_config
from .model import SPRModel

__all__ = ["Config", "SPRModel", "micro_config"]
__version__ = "0.1.0"
