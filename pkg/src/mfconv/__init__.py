"""Multifidelity convolutional surrogates with Monte Carlo DropBlock uncertainty."""

from mfconv.tensor import DimensionError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["DimensionError", "Tensor", "no_grad", "__version__"]
