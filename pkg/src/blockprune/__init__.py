"""Benefit-driven structured pruning for small vision transformers."""

__version__ = "0.1.0"
