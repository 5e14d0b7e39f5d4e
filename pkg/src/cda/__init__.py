"""Finite-element continuous data assimilation for double-diffusive convection."""

__version__ = "0.1.0"
