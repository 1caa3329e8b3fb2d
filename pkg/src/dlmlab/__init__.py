"""Toy masked-diffusion LM + Top-K sparse autoencoder laboratory."""

__version__ = "0.1.0"
