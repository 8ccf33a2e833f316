"""Discrete latent motion priors for planar physics-based characters."""

__version__ = "0.1.0"
