"""Sampling-based global search for low-thrust transfers between distant retrograde orbits."""

__version__ = "0.1.0"
