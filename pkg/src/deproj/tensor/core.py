"""Tensors and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

MAX_RANK = 5

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("deproj_tape", default=None)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """Dense array (rank <= 5, float32 by default) that can take part in a tape.

    Leaf tensors created with ``requires_grad=True`` are parameters: a
    backward pass reports a gradient for each one reachable from the loss.
    Tensors hash by identity so they can key gradient dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape_id = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from deproj.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from deproj.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from deproj.tensor import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from deproj.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from deproj.tensor import ops
        if isinstance(other, Tensor):
            raise TypeError("division only by scalars")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from deproj.tensor import ops
        return ops.neg(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@dataclass(frozen=True)
class TapeEntry:
    output: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered log of differentiable operations executed inside ``with tape:``.

    One tape per forward graph; entries are appended in execution order so
    the list is already topologically sorted.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self):
        if self._token is not None:
            raise RuntimeError("tape already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, output: Tensor, inputs, vjp, op: str) -> None:
        output.requires_grad = True
        output._tape_id = id(self)
        self.entries.append(TapeEntry(output, tuple(inputs), vjp, op))


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def record(output: Tensor, inputs, vjp, op: str) -> Tensor:
    """Register ``output`` on the active tape if any input is differentiable."""
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(output, inputs, vjp, op)
    return output


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of scalar ``loss`` w.r.t. every parameter reachable from it.

    Returns a dict keyed by the parameter tensors. Fan-out contributions are
    summed. The tape is left untouched, so repeated calls agree exactly.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape_id != id(tape):
        raise ValueError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    produced = {id(e.output) for e in tape.entries}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return {leaves[k]: grads[k] for k in leaves}
