"""Pure-numpy convolution kernels (fallback path).

``im2col`` lowers an NHWC batch to a patch matrix so the actual
convolution is a single BLAS GEMM; ``col2im`` is its adjoint
(scatter-add of patch gradients back onto the image grid).  Zero
padding is folded into both kernels.
"""

import numpy as np


def conv_out_size(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, H, W, C) input -> (N*OH*OW, k*k*C) patch matrix."""
    n, h, w, c = x.shape
    oh, ow = conv_out_size(h, w, k, stride, pad)
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + w, :] = x
    else:
        xp = x
    sn, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n * oh * ow, k * k * c)


def col2im(
    gcols: np.ndarray, n: int, h: int, w: int, c: int, k: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of im2col: (N*OH*OW, k*k*C) -> (N, H, W, C) with overlap-add."""
    oh, ow = conv_out_size(h, w, k, stride, pad)
    g6 = gcols.reshape(n, oh, ow, k, k, c)
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride, :] += (
                g6[:, :, :, di, dj, :]
            )
    if pad:
        return gxp[:, pad : pad + h, pad : pad + w, :]
    return np.ascontiguousarray(gxp)
