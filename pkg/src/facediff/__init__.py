"""Coarse-to-fine controllable diffusion for 3D facial motion."""
__version__ = "0.1.0"
