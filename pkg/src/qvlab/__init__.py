"""Numerical laboratory for complexified diffusion processes on (pseudo-)Riemannian charts."""

__version__ = "0.1.0"
