"""Numba-jitted convolution kernels (default path).

Same contracts as ``numpy_kernels``, with zero padding handled by
bounds checks instead of a padded scratch buffer.  Loops are
sequential and race-free so results are bitwise reproducible.
"""

import numpy as np
from numba import njit

from .numpy_kernels import conv_out_size


@njit(cache=True, nogil=True)
def _im2col_fill(x, k, stride, pad, out, oh, ow):
    n, h, w, c = x.shape
    for i in range(n):
        for oi in range(oh):
            i0 = oi * stride - pad
            for oj in range(ow):
                j0 = oj * stride - pad
                row = (i * oh + oi) * ow + oj
                base = 0
                for ki in range(k):
                    src_i = i0 + ki
                    inside_i = 0 <= src_i < h
                    for kj in range(k):
                        src_j = j0 + kj
                        if inside_i and 0 <= src_j < w:
                            for ch in range(c):
                                out[row, base + ch] = x[i, src_i, src_j, ch]
                        else:
                            for ch in range(c):
                                out[row, base + ch] = 0.0
                        base += c


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, H, W, C) input -> (N*OH*OW, k*k*C) patch matrix."""
    n, h, w, c = x.shape
    oh, ow = conv_out_size(h, w, k, stride, pad)
    out = np.empty((n * oh * ow, k * k * c), dtype=x.dtype)
    _im2col_fill(np.ascontiguousarray(x), k, stride, pad, out, oh, ow)
    return out


@njit(cache=True, nogil=True)
def _col2im_fill(gcols, gx, k, stride, pad, oh, ow):
    n, h, w, c = gx.shape
    for i in range(n):
        for oi in range(oh):
            i0 = oi * stride - pad
            for oj in range(ow):
                j0 = oj * stride - pad
                row = (i * oh + oi) * ow + oj
                base = 0
                for ki in range(k):
                    src_i = i0 + ki
                    inside_i = 0 <= src_i < h
                    for kj in range(k):
                        src_j = j0 + kj
                        if inside_i and 0 <= src_j < w:
                            for ch in range(c):
                                gx[i, src_i, src_j, ch] += gcols[row, base + ch]
                        base += c


def col2im(
    gcols: np.ndarray, n: int, h: int, w: int, c: int, k: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of im2col: (N*OH*OW, k*k*C) -> (N, H, W, C) with overlap-add."""
    oh, ow = conv_out_size(h, w, k, stride, pad)
    gx = np.zeros((n, h, w, c), dtype=gcols.dtype)
    _col2im_fill(np.ascontiguousarray(gcols), gx, k, stride, pad, oh, ow)
    return gx
