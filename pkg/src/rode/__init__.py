"""Mixture of heterogeneous-rank LoRA experts with a linear-rectified router, on a toy transformer."""

__version__ = "0.1.0"
