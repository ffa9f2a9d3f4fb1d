"""Latent-conditioned shifting-buffer sequence decoder trained as a conditional VAE."""

__version__ = "0.1.0"
