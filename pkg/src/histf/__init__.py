"""Hierarchical spatio-temporal fusion Mamba denoiser for text-to-motion diffusion."""

__version__ = "0.1.0"
