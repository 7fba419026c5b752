"""Unsupervised instance-discrimination embeddings for image chips."""

__version__ = "0.1.0"
