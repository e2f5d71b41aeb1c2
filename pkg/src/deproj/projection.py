"""Linear collapse of a signal along one axis: ``x = sum_k w_k * y[axis=k]``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from deproj.tensor import ShapeError, Tensor, ops


@dataclass(frozen=True)
class ProjectionSpec:
    """Collapsed axis and its weights.

    ``axis`` counts the spatial/temporal axes of a clip, i.e. it skips the
    channel axis (and the batch axis for batched data). ``weights=None``
    means plain averaging over whatever extent the axis has.
    """

    axis: int = 0
    weights: Optional[tuple] = None

    def weights_for(self, extent: int) -> np.ndarray:
        if self.weights is None:
            return np.full(extent, 1.0 / extent)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (extent,):
            raise ShapeError(f"projection weights have length {w.size}, axis extent is {extent}")
        return w

    @classmethod
    def averaging(cls, axis: int = 0, extent: Optional[int] = None) -> "ProjectionSpec":
        if extent is None:
            return cls(axis)
        return cls(axis, tuple([1.0 / extent] * extent))

    @classmethod
    def one_hot(cls, axis: int, extent: int, k: int) -> "ProjectionSpec":
        w = [0.0] * extent
        w[k] = 1.0
        return cls(axis, tuple(w))


def _resolve_axis(ndim: int, spec: ProjectionSpec, lead: int) -> int:
    n_spatial = ndim - lead
    if not 0 <= spec.axis < n_spatial:
        raise ShapeError(f"projection axis {spec.axis} out of range for {n_spatial} spatial axes")
    return lead + spec.axis


def project(signal, spec: ProjectionSpec, batched: bool = False):
    """Collapse ``signal`` along ``spec.axis``.

    ``signal`` is ``[C, *S]`` (or ``[B, C, *S]`` with ``batched=True``). A
    ``Tensor`` input goes through the tape; a numpy input returns numpy.
    """
    lead = 2 if batched else 1
    if isinstance(signal, Tensor):
        axis = _resolve_axis(signal.ndim, spec, lead)
        return ops.weighted_sum(signal, axis, spec.weights_for(signal.shape[axis]))
    arr = np.asarray(signal)
    axis = _resolve_axis(arr.ndim, spec, lead)
    w = spec.weights_for(arr.shape[axis]).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    return np.tensordot(arr, w, axes=([axis], [0]))


def projected_shape(signal_shape: Sequence[int], spec: ProjectionSpec) -> tuple:
    axis = _resolve_axis(len(signal_shape), spec, 1)
    return tuple(s for i, s in enumerate(signal_shape) if i != axis)


def projection_matrix(spec: ProjectionSpec, signal_shape: Sequence[int]) -> np.ndarray:
    """Dense matrix ``P`` with ``project(y) == P @ y.ravel()`` (row-major)."""
    signal_shape = tuple(signal_shape)
    axis = _resolve_axis(len(signal_shape), spec, 1)
    w = spec.weights_for(signal_shape[axis])
    out_shape = projected_shape(signal_shape, spec)
    D = int(np.prod(signal_shape))
    d = int(np.prod(out_shape))
    P = np.zeros((d, D))
    src = np.arange(D).reshape(signal_shape)
    rows = np.arange(d).reshape(out_shape)
    for k in range(signal_shape[axis]):
        cols = np.take(src, k, axis=axis)
        P[rows.ravel(), cols.ravel()] = w[k]
    return P
