"""Diffusion recommenders and baselines benchmarked under fairness metrics."""

__version__ = "0.1.0"
