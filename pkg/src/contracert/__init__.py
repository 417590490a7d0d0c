"""Interval-based contraction certificates for neural feedback loops."""

__version__ = "0.1.0"
