"""Simulation and verification lab for asset prices with a random change point."""

__version__ = "0.1.0"
