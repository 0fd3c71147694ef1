"""Gaussian and uniform random waves on the sphere and the flat torus:
excursion functionals, Wiener-chaos projections and their closed forms."""

__version__ = "0.1.0"
