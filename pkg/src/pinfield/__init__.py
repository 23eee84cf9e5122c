"""Lattice Monte Carlo and exact checks for delta-pinned gradient interface models on Z^2."""

__version__ = "0.1.0"
