"""Quantum state steering through Schrödinger bridges over Nelson diffusions."""

__version__ = "0.1.0"
