"""Finite-volume homogenization quantities for random conductance models on Z^d."""

__version__ = "0.1.0"
