"""Selective neighborhood modeling recommender."""

__version__ = "0.1.0"
