"""Generalized zero-shot point-cloud segmentation with sparse MoE networks."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
