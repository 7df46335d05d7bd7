"""Minimal reverse-mode autodiff engine covering the classifier's layer set."""

from tonescope.engine.functional import (
    conv2d,
    dropout,
    flatten,
    linear,
    maxpool2d,
    relu,
    softmax,
    softmax_cross_entropy,
)
from tonescope.engine.gradcheck import check_tensors, finite_difference_check
from tonescope.engine.kernels import BACKEND
from tonescope.engine.optim import SGD, Adam, AdamState, RMSProp, adam_step, make_optimizer
from tonescope.engine.tensor import Graph, ShapeError, Tensor, backward

__all__ = [
    "BACKEND",
    "Adam",
    "AdamState",
    "Graph",
    "RMSProp",
    "SGD",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "check_tensors",
    "conv2d",
    "dropout",
    "finite_difference_check",
    "flatten",
    "linear",
    "make_optimizer",
    "maxpool2d",
    "relu",
    "softmax",
    "softmax_cross_entropy",
]
