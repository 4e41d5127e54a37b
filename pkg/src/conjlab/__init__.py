"""Conjugate points and bifurcation of perturbed geodesics on flat and
conformally flat three-dimensional spaces."""

__version__ = "0.1.0"
