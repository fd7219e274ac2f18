"""Correspondence pruning with spatial/channel transformer blocks."""

__version__ = "0.1.0"
