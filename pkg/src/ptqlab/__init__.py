"""Desk-scale post-training quantization laboratory."""

__version__ = "0.1.0"
