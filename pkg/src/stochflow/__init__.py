"""Stochastic flows, differential forms and martingale circulation diagnostics."""

__version__ = "0.1.0"
