"""Desk-scale dual-encoder vision-language model with a complete low-rank
adaptation engine and a few-shot benchmark harness."""

from .tensor import Tensor, Tape
from .model import DualEncoderModel, ModelConfig
from .lora import LoRAModule, PlacementConfig, inject, merge, unmerge

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "DualEncoderModel", "ModelConfig", "LoRAModule",
           "PlacementConfig", "inject", "merge", "unmerge", "__version__"]
