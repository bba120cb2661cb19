"""Temporal action detection as 1D semantic segmentation, on a small numpy autodiff engine."""

__version__ = "0.1.0"
