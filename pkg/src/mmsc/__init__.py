"""Relational item embeddings for substitute and complement recommendation."""

__version__ = "0.1.0"
