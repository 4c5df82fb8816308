"""Trajectory-wise preference optimisation on a toy 2D pick-and-place world."""

__version__ = "0.1.0"
