"""Lognormal moment-matching state space models."""

__version__ = "0.1.0"
