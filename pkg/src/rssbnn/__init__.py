"""Radial spike-and-slab Bayesian neural networks for sparse binary
event classification: reverse-mode autodiff, variational layers, a
training loop, synthetic data tooling, and evaluation reports."""

from . import autodiff, data, distributions, evaluation, layers, plots, training
from .autodiff import GraphNode, Tensor, backward, grad_check
from .distributions import (
    BernoulliLogit,
    GumbelConfig,
    PriorConfig,
    RadialParams,
    SpikeSlabRadialParams,
)
from .layers import BnnModel, ForwardMode, VariationalLinear, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "data",
    "distributions",
    "evaluation",
    "layers",
    "plots",
    "training",
    "Tensor",
    "GraphNode",
    "backward",
    "grad_check",
    "RadialParams",
    "BernoulliLogit",
    "SpikeSlabRadialParams",
    "PriorConfig",
    "GumbelConfig",
    "VariationalLinear",
    "BnnModel",
    "ForwardMode",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "TrainReport",
    "train",
    "__version__",
]
