"""Adaptive hexahedral FEM simulation of needle insertion into soft tissue."""

__version__ = "0.1.0"
