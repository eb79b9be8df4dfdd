"""Shifted patch tokenization and locality self-attention for small-data vision transformers."""

__version__ = "0.1.0"
