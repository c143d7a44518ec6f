"""Transformer Encoder Reasoning Network for image-text matching, in numpy."""

from .config import EvalConfig, RunConfig, TernConfig, TrainConfig
from .model import TERN

__all__ = ["TERN", "TernConfig", "TrainConfig", "EvalConfig", "RunConfig"]
__version__ = "0.1.0"
