"""Transformer-based multimodal translation with an imagination objective."""

__version__ = "0.1.0"
