"""Test-time-trained neural cellular automata for ARC-AGI grids."""

__version__ = "0.1.0"
