"""Closed-form solutions of two switching multiple-disorder problems for Brownian motion."""

__version__ = "0.1.0"
