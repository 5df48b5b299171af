"""Desk-scale numerical laboratory for quantum Metropolis-Hastings sampling
with mean-estimated target distributions."""

__version__ = "0.1.0"
