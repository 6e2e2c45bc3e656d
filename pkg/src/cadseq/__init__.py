"""Contrastive autoencoding of CAD construction sequences."""

__version__ = "0.1.0"
