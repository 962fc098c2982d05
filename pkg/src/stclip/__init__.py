"""Spatio-temporal context aware prompt learning for traffic scene understanding."""

__version__ = "0.1.0"
