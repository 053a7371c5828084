"""Minimal numpy autodiff substrate: layers, losses, initialisation, optimizers, checkpoints."""

from . import functional
from .errors import DomainError, MissingGradientError, NonFiniteError, ShapeError
from .init import leaky_relu_gain, orthogonal_
from .kernels import BACKEND
from .layers import (
    BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Flatten, LeakyReLU, Linear, Module,
    Parameter, Reshape, Sequential, Sigmoid,
)
from .optim import Optimizer

__all__ = [
    "BACKEND", "BatchNorm2d", "Conv2d", "ConvTranspose2d", "DomainError", "Dropout", "Flatten",
    "LeakyReLU", "Linear", "MissingGradientError", "Module", "NonFiniteError", "Optimizer",
    "Parameter", "Reshape", "Sequential", "ShapeError", "Sigmoid", "functional",
    "leaky_relu_gain", "orthogonal_",
]
