"""Minimal tensor engine with tape-based reverse-mode differentiation."""

from deproj.tensor.core import MAX_RANK, ShapeError, Tape, Tensor, as_tensor, backward, current_tape
from deproj.tensor import kernels, ops

__all__ = [
    "MAX_RANK",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "kernels",
    "ops",
]
