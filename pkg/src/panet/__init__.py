"""Piecewise approximation for multiple-binary convolutional networks."""

__version__ = "0.1.0"
