"""Discrete combinatorial moduli on self-similar fractal covers."""

__version__ = "0.1.0"
