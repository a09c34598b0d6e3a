"""Multimodal attention-fusion memorability predictor on precomputed embeddings."""

__version__ = "0.1.0"
