"""Desk-scale colloquial-description-to-song generation with latent diffusion
and interpolant transformers."""

__version__ = "0.1.0"
