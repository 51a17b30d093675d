"""Gated linear dilated residual sequence encoders with a small autodiff core."""

__version__ = "0.1.0"
