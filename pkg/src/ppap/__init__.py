"""Probabilistic prompt distribution learning for multi-species keypoint estimation."""

__version__ = "0.1.0"
