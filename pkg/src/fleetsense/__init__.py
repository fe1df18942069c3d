"""Spatiotemporal sensing utility and budgeted vehicle fleet selection."""

__version__ = "0.1.0"
