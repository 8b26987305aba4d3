"""Continuous-action Q-learning with pluggable max-Q solvers."""

__version__ = "0.1.0"
