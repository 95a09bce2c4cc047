"""Nonholonomic frame geometry and Ricci flows."""

__version__ = "0.1.0"
