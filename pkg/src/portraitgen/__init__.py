"""Toy 3D-aware head-and-shoulders portrait generator with radiance manifolds."""

__version__ = "0.1.0"
