"""Segmenting play trajectories into instruction-labelled segments by exact dynamic programming."""

__version__ = "0.1.0"
