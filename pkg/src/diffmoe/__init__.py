"""Diffusion transformers with a globally pooled, dynamically sized mixture of experts."""
from .model import ModelConfig, build_model, model_forward
from .trainer import TrainConfig, train

__all__ = ["ModelConfig", "TrainConfig", "build_model", "model_forward", "train"]
__version__ = "0.1.0"
