"""Adaptive octree of small coordinate networks for neural volume rendering."""

__version__ = "0.1.0"
