"""Behavioral segmentation for segment-level A/B test analysis."""
from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
