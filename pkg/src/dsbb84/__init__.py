"""Decoy-state BB84 post-processing toolkit."""

__version__ = "0.1.0"
