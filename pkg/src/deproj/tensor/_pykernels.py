"""Pure numpy im2col / col2im, used when the compiled extension is unavailable.

Both functions work on inputs normalized to three spatial axes
``[B, C, D, H, W]``; lower-rank convolutions insert singleton axes first.
Column layout is ``[C * kd * kh * kw, B * od * oh * ow]``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xpad, ksize, stride, oshape):
    B, C = xpad.shape[:2]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = oshape
    win = sliding_window_view(xpad, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : sd * (od - 1) + 1 : sd, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]
    # [B, C, od, oh, ow, kd, kh, kw] -> [C, kd, kh, kw, B, od, oh, ow]
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(C * kd * kh * kw, B * od * oh * ow)


def col2im(cols, xshape, ksize, stride, oshape):
    B, C, Dp, Hp, Wp = xshape
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = oshape
    out = np.zeros((C, B, Dp, Hp, Wp), dtype=cols.dtype)
    c8 = cols.reshape(C, kd, kh, kw, B, od, oh, ow)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                out[:, :, i : i + sd * od : sd, j : j + sh * oh : sh, k : k + sw * ow : sw] += c8[:, i, j, k]
    return out.transpose(1, 0, 2, 3, 4)
