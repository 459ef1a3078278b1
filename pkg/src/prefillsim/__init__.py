"""Deterministic multi-adapter serving simulator and adapter math library."""

__version__ = "0.1.0"
