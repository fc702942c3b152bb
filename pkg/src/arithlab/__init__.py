"""Desk-scale laboratory for place-value decomposition arithmetic experiments."""

__version__ = "0.1.0"
