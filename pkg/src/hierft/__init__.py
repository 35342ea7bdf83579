"""Hierarchical fine-tuning text classification over a three-level category tree."""

__version__ = "0.1.0"
