"""Coarse-point refinement and point-based object localization."""

__version__ = "0.1.0"
