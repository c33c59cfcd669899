"""Interaction-then-integration fusion of top-down and bottom-up referring segmentation."""

from .domain import (BinaryMask, InstanceTripletSet, PixelEmbeddings, ProbabilityMap, Sample,
                     binarize, decode_bottomup, extract_topdown_result)
from .model import ModelConfig, forward, init_model
from .tensor import Tensor, finite_difference_check

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "InstanceTripletSet", "PixelEmbeddings", "ProbabilityMap", "Sample",
    "binarize", "decode_bottomup", "extract_topdown_result", "ModelConfig", "forward",
    "init_model", "Tensor", "finite_difference_check",
]
