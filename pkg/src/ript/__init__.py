"""Rotation-invariant point set transformer with self-distillation pretraining."""

__version__ = "0.1.0"
