"""Curate noisy web image collections and augment them into multi-label datasets."""

__version__ = "0.1.0"
