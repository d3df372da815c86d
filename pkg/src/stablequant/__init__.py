"""Quantization-aware training and integer inference for stable residual networks."""

__version__ = "0.1.0"
