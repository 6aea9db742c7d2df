"""Optimal consumption and investment with CRRA utility."""

__version__ = "0.1.0"
