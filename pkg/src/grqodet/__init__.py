"""Visually-prompted query detector trained with SFT or Group Relative Query Optimization."""

__version__ = "0.1.0"
