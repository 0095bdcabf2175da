"""Numerical laboratory for the corrector of the discrete random conductance model."""

__version__ = "0.1.0"
