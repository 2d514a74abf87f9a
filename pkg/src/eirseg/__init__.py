"""Continual semantic segmentation with enhanced instance replay."""

__version__ = "0.1.0"
