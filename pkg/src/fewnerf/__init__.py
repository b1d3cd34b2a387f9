"""Few-shot NeRF variants on a from-scratch reverse-mode autodiff core."""

__version__ = "0.1.0"
