"""Latent-space disguise generation and detection on a small convolutional autoencoder."""

__version__ = "0.1.0"
