"""Variational Monte Carlo spectra of spin chains with RBM correction vectors."""

__version__ = "0.1.0"
