"""Finite-element ice-flow instructor and graph neural network emulators."""

__version__ = "0.1.0"
