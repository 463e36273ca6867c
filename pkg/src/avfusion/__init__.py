"""Attention-based face/voice embedding fusion for person verification."""

__version__ = "0.1.0"
