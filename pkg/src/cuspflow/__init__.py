"""Normalized Ricci flow on punctured tori with hyperbolic cusp ends."""

__version__ = "0.1.0"
