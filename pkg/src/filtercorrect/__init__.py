"""Distortion-susceptibility ranking, residual correction units and low-rank conv approximations."""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
