"""Quantum diffusion convolution toolkit."""
__version__ = "0.1.0"
