"""Functional scaling laws for SGD on power-law kernel regression."""

__version__ = "0.1.0"
