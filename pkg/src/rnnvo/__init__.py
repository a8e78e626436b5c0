"""Recurrent multi-view monocular depth and visual odometry, built on numpy."""

__version__ = "0.1.0"
