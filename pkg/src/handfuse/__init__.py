"""Spatio-temporal hand pose estimation from depth image sequences."""

__version__ = "0.1.0"
