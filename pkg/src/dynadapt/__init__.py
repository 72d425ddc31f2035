"""Dynamics-conditioned policies with Bayesian system identification for zero-shot transfer."""

__version__ = "0.1.0"
