"""Sparse optimal control of a viscous Cahn-Hilliard tumor model with deep-quench continuation."""

__version__ = "0.1.0"
