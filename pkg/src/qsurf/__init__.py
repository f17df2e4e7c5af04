"""Quadrature surfaces by direct variational minimization on Cartesian grids."""

__version__ = "0.1.0"
