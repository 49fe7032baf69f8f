"""Siamese-network semantic code search in numpy."""

__version__ = "0.1.0"
