"""Latent-space extreme image rescaling with one-step diffusion enhancement."""

__version__ = "0.1.0"
