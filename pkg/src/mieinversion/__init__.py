"""Refractive-index retrieval for monodisperse aerosols from spectral extinction."""

__version__ = "0.1.0"
