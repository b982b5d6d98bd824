"""Desk-scale video depth estimation with geometry embeddings and spatio-temporal attention."""

__version__ = "0.1.0"
