"""Distillation and iterative pruning toolkit for efficient super-resolution."""

__version__ = "0.1.0"
