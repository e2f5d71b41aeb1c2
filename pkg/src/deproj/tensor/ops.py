"""Differentiable operations.

Every op computes its forward value with numpy and, when a tape is active
and some input requires gradients, records a vector-Jacobian product.
Layout is ``[batch, channel, *spatial]`` with one to three spatial axes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from deproj.tensor import kernels
from deproj.tensor.core import ShapeError, Tensor, as_tensor, record


def _per_axis(value, nd, what):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * nd
    value = tuple(int(v) for v in value)
    if len(value) != nd:
        raise ShapeError(f"{what} needs {nd} entries, got {value}")
    return value


def _to3(seq, fill):
    return (fill,) * (3 - len(seq)) + tuple(seq)


def _result(data, like):
    return Tensor(np.asarray(data, dtype=like.dtype), dtype=like.dtype)


def _scalar_or_tensor(other, like):
    if isinstance(other, Tensor):
        if other.shape != like.shape:
            raise ShapeError(f"elementwise shapes differ: {like.shape} vs {other.shape}")
        return other
    return None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    other = _scalar_or_tensor(b, a)
    if other is None:
        out = _result(a.data + b, a)
        return record(out, (a,), lambda g: (g,), "add_scalar")
    out = _result(a.data + other.data, a)
    return record(out, (a, other), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, a)
    return record(out, (a,), lambda g: (-g,), "neg")


def sub(a: Tensor, b) -> Tensor:
    other = _scalar_or_tensor(b, a)
    if other is None:
        out = _result(a.data - b, a)
        return record(out, (a,), lambda g: (g,), "sub_scalar")
    out = _result(a.data - other.data, a)
    return record(out, (a, other), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    other = _scalar_or_tensor(b, a)
    if other is None:
        s = b
        out = _result(a.data * s, a)
        return record(out, (a,), lambda g: (g * s,), "mul_scalar")
    ad, bd = a.data, other.data
    out = _result(ad * bd, a)
    return record(out, (a, other), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    out = _result(ad * ad, a)
    return record(out, (a,), lambda g: (2 * g * ad,), "square")


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    out = _result(val, a)
    return record(out, (a,), lambda g: (g * val,), "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where clipping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = _result(np.clip(a.data, lo, hi), a)
    return record(out, (a,), lambda g: (g * inside,), "clamp")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 <= slope < 1:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    pos = a.data >= 0
    out = _result(np.where(pos, a.data, a.data * slope), a)
    return record(out, (a,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # split branches keep exp() from overflowing
    x = a.data
    e = np.exp(-np.abs(x))
    val = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    out = _result(val, a)
    return record(out, (a,), lambda g: (g * val * (1 - val),), "sigmoid")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        out = _result(np.sum(a.data, dtype=a.dtype).reshape(()), a)
        return record(out, (a,), lambda g: (np.broadcast_to(g, shape),), "sum")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    out = _result(np.sum(a.data, axis=axes), a)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return record(out, (a,), vjp, "sum_axis")


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.size)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = _result(np.sum(diff * diff, dtype=a.dtype) / n, a)
    return record(out, (a, b), lambda g: (g * (2.0 / n) * diff, g * (-2.0 / n) * diff), "mse")


def weighted_sum(a: Tensor, axis: int, weights) -> Tensor:
    """Contract ``axis`` against ``weights``, dropping that axis."""
    w = np.asarray(weights, dtype=a.dtype)
    axis = axis % a.ndim
    if w.ndim != 1 or w.shape[0] != a.shape[axis]:
        raise ShapeError(f"weights of length {w.shape} do not match extent {a.shape[axis]} of axis {axis}")
    out = _result(np.tensordot(a.data, w, axes=([axis], [0])), a)
    shape = [1] * a.ndim
    shape[axis] = w.shape[0]
    wb = w.reshape(shape)

    def vjp(g):
        return (np.expand_dims(g, axis) * wb,)

    return record(out, (a,), vjp, "weighted_sum")


# ---------------------------------------------------------------- structure


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size or any(s < 1 for s in shape):
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    src = a.shape
    out = _result(a.data.reshape(shape), a)
    return record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = _result(np.ascontiguousarray(a.data.transpose(axes)), a)
    return record(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, first.shape)) if i != axis
        ):
            raise ShapeError(f"cannot concatenate {first.shape} with {t.shape} along axis {axis}")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), first)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return record(out, tuple(tensors), vjp, "concat")


def upsample(a: Tensor, factor) -> Tensor:
    """Nearest-neighbour upsampling of the spatial axes."""
    nd = a.ndim - 2
    if nd < 1:
        raise ShapeError(f"upsample needs spatial axes, got shape {a.shape}")
    factor = _per_axis(factor, nd, "factor")
    if any(f < 1 for f in factor):
        raise ValueError(f"factor must be >= 1, got {factor}")
    data = a.data
    for i, f in enumerate(factor):
        if f > 1:
            data = np.repeat(data, f, axis=2 + i)
    out = _result(data, a)
    B, C = a.shape[:2]
    src = a.shape[2:]

    def vjp(g):
        # fold every upsampled axis into (extent, factor) and sum the factor
        split = [B, C]
        for s, f in zip(src, factor):
            split += [s, f]
        return (g.reshape(split).sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return record(out, (a,), vjp, "upsample")


# ---------------------------------------------------------------- layers


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape ``[batch, n]`` and ``w`` of ``[m, n]``."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape} do not agree")
    xd, wd = x.data, w.data
    out = _result(xd @ wd.T + b.data, x)

    def vjp(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return record(out, (x, w, b), vjp, "dense")


def conv_output_shape(in_shape, ksize, stride, padding):
    return tuple((i + 2 * p - k) // s + 1 for i, k, s, p in zip(in_shape, ksize, stride, padding))


def conv(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """Zero-padded cross-correlation over 1-3 spatial axes.

    ``x`` is ``[B, C, *S]``, ``w`` is ``[Co, C, *K]`` and ``b`` is ``[Co]``.
    """
    nd = x.ndim - 2
    if nd < 1 or nd > 3 or w.ndim != nd + 2 or b.ndim != 1 or w.shape[0] != b.shape[0] or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv: input {x.shape} and kernel {w.shape} (bias {b.shape}) do not agree")
    stride = _per_axis(stride, nd, "stride")
    padding = _per_axis(padding, nd, "padding")
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ValueError(f"bad stride {stride} or padding {padding}")
    ksize = w.shape[2:]
    spatial = x.shape[2:]
    if any(k > s + 2 * p for k, s, p in zip(ksize, spatial, padding)):
        raise ShapeError(f"conv: kernel {w.shape} larger than padded input {x.shape}")
    B, C = x.shape[:2]
    Co = w.shape[0]
    oshape = conv_output_shape(spatial, ksize, stride, padding)
    O = int(np.prod(oshape))

    xd = x.data
    if any(padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    pshape = xd.shape
    x5 = xd.reshape((B, C) + _to3(pshape[2:], 1))
    k3, s3, o3 = _to3(ksize, 1), _to3(stride, 1), _to3(oshape, 1)
    cols = kernels.im2col(x5, k3, s3, o3)
    wmat = w.data.reshape(Co, -1)
    res = (wmat @ cols).reshape(Co, B, O)
    res += b.data[:, None, None]
    out = _result(np.ascontiguousarray(res.transpose(1, 0, 2)).reshape((B, Co) + oshape), x)

    def vjp(g):
        gt = np.ascontiguousarray(g.reshape(B, Co, O).transpose(1, 0, 2)).reshape(Co, B * O)
        gw = (gt @ cols.T).reshape(w.shape)
        gb = gt.sum(axis=1)
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ gt
            gx5 = kernels.col2im(dcols, x5.shape, k3, s3, o3)
            gx = gx5.reshape(pshape)
            if any(padding):
                gx = gx[(slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, spatial))]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return record(out, (x, w, b), vjp, "conv")
