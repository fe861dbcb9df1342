"""Dimension-agnostic perturbation attribution with convergence verification."""

__version__ = "0.1.0"
