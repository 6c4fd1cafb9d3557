"""Slide-level stain augmentation and latent style augmentation for MIL."""

__version__ = "0.1.0"
