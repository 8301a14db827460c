"""Desk-scale lab for token-based parameter-efficient fine-tuning of plain ViTs."""

from .tensor import Tensor, Tape

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
