"""Chunking-strategy benchmark toolkit for statutory-text retrieval."""

__version__ = "0.1.0"
