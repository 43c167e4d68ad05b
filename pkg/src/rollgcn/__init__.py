"""Causal, windowed LightGCN for time-sensitive recommendation."""

__version__ = "0.1.0"
