"""Keypoint-based room layout estimation with a from-scratch numpy autodiff engine."""

__version__ = "0.1.0"
