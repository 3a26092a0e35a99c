"""Simulation toolkit for perceptual-hash client-side scanning and database poisoning."""

__version__ = "0.1.0"
