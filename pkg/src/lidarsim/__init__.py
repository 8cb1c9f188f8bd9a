"""Surfel-based LiDAR simulation."""

__version__ = "0.1.0"
