"""Spectral-spatial graph reasoning network for hyperspectral classification.

A numpy-backed library: dense tensors with reverse-mode differentiation,
spectral graph math, differentiable superpixels, spatial and spectral graph
reasoning branches, training/evaluation utilities and portable file formats.
"""

from .data import HsiCube, LabelMap, SplitSpec, make_split, standardize, synth_scene
from .model import SSGRN, ModelConfig, ModelState, count_attention_ops, count_params
from .superpixels import SlicConfig
from .tensor import Tensor, no_grad
from .training import TrainConfig, train

__all__ = [
    "HsiCube",
    "LabelMap",
    "ModelConfig",
    "ModelState",
    "SSGRN",
    "SlicConfig",
    "SplitSpec",
    "Tensor",
    "TrainConfig",
    "count_attention_ops",
    "count_params",
    "make_split",
    "no_grad",
    "standardize",
    "synth_scene",
    "train",
]
__version__ = "0.1.0"
