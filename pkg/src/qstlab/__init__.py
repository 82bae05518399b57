"""Quantum state tomography workbench."""

__version__ = "0.1.0"
