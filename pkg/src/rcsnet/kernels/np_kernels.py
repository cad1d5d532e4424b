"""Pure-numpy kernels: im2col convolution and windowed max pooling.

This is the fallback backend; see rcsnet.kernels for selection. All kernels
take and return float32 NCHW arrays and accumulate in float32 (the matmul
is a single-precision BLAS call).
"""

import numpy as np


def conv2d(x, kernel, bias, stride, padding):
    """Cross-correlate x (n,ci,h,w) with kernel (co,ci,k,k) plus bias (co,)."""
    n, ci, h, w = x.shape
    co, _, k, _ = kernel.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    if k == 1:
        cols = x[:, :, ::stride, ::stride].reshape(n, ci, ho * wo)
    else:
        sn, sc, sh, sw = x.strides
        windows = np.lib.stride_tricks.as_strided(
            x,
            shape=(n, ci, k, k, ho, wo),
            strides=(sn, sc, sh, sw, sh * stride, sw * stride),
            writeable=False,
        )
        cols = np.ascontiguousarray(windows).reshape(n, ci * k * k, ho * wo)

    out = np.matmul(kernel.reshape(co, -1), cols).reshape(n, co, ho, wo)
    out += bias[None, :, None, None]
    return out


def maxpool2d(x, k, stride):
    """Windowed maximum over (k,k) patches, no padding."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    return windows.max(axis=(4, 5))
