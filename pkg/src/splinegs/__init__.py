"""Desk-scale dynamic scene reconstruction with spline-based Gaussian splatting."""

__version__ = "0.1.0"
