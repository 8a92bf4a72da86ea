"""Plausibility filtering of 3D polylines with sequence edge convolution."""

__version__ = "0.1.0"
