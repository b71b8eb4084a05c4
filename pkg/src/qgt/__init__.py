"""Quantum graph transformer for sentence classification."""

__version__ = "0.1.0"
