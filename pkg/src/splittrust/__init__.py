"""Deterministic emulator of a split-trust machine."""

__version__ = "0.1.0"
