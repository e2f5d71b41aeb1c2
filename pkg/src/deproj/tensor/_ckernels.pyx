# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im over three spatial axes.

Same contract as ``_pykernels``: inputs are ``[B, C, D, H, W]`` and the
column matrix is ``[C * kd * kh * kw, B * od * oh * ow]``.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef void _im2col(const real[:, :, :, :, ::1] x, real[:, ::1] cols,
                  Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t od, Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t c, i, j, k, b, d, h, w, row
    cdef const real* src
    cdef const real* line
    cdef real* dst
    for c in range(C):
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    row = ((c * kd + i) * kh + j) * kw + k
                    dst = &cols[row, 0]
                    for b in range(B):
                        src = &x[b, c, 0, 0, 0]
                        for d in range(od):
                            for h in range(oh):
                                line = src + ((d * sd + i) * H + h * sh + j) * W + k
                                if sw == 1:
                                    for w in range(ow):
                                        dst[w] = line[w]
                                else:
                                    for w in range(ow):
                                        dst[w] = line[w * sw]
                                dst += ow


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, :, ::1] x,
                  Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t od, Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t c, i, j, k, b, d, h, w, row
    cdef real* dst
    cdef real* line
    cdef const real* src
    for c in range(C):
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    row = ((c * kd + i) * kh + j) * kw + k
                    src = &cols[row, 0]
                    for b in range(B):
                        dst = &x[b, c, 0, 0, 0]
                        for d in range(od):
                            for h in range(oh):
                                line = dst + ((d * sd + i) * H + h * sh + j) * W + k
                                if sw == 1:
                                    for w in range(ow):
                                        line[w] += src[w]
                                else:
                                    for w in range(ow):
                                        line[w * sw] += src[w]
                                src += ow


def im2col(xpad, ksize, stride, oshape):
    xpad = np.ascontiguousarray(xpad)
    B, C = xpad.shape[0], xpad.shape[1]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = oshape
    cols = np.empty((C * kd * kh * kw, B * od * oh * ow), dtype=xpad.dtype)
    if xpad.dtype == np.float32:
        _im2col[float](xpad, cols, kd, kh, kw, sd, sh, sw, od, oh, ow)
    elif xpad.dtype == np.float64:
        _im2col[double](xpad, cols, kd, kh, kw, sd, sh, sw, od, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {xpad.dtype}")
    return cols


def col2im(cols, xshape, ksize, stride, oshape):
    cols = np.ascontiguousarray(cols)
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = oshape
    out = np.zeros(tuple(xshape), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, kd, kh, kw, sd, sh, sw, od, oh, ow)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, kd, kh, kw, sd, sh, sw, od, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
