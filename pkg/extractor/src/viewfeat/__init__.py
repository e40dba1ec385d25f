"""Pretrained-encoder feature extraction for rendered multi-view images."""

__version__ = "0.1.0"
