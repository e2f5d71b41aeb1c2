"""Backend selection for the convolution gather/scatter kernels.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is picked at import time. Both produce identical results
(the scatter loops accumulate in the same order).
"""

import logging

from deproj.tensor import _pykernels

logger = logging.getLogger(__name__)

try:
    from deproj.tensor import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_active = _BACKENDS.get("compiled", _pykernels)


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return "compiled" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name):
    """Switch kernels globally; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    previous = active_backend()
    _active = _BACKENDS[name]
    logger.debug("conv kernels backend: %s", name)
    return previous


def im2col(xpad, ksize, stride, oshape):
    return _active.im2col(xpad, ksize, stride, oshape)


def col2im(cols, xshape, ksize, stride, oshape):
    return _active.col2im(cols, xshape, ksize, stride, oshape)
