"""Singular solutions and boundary data for complex anisotropic diffusion."""

__version__ = "0.1.0"
