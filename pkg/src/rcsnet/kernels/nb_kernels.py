"""Numba-jitted kernels: direct convolution and max pooling.

Hot-loop layout: one prange task per (batch, out-channel) pair, row buffer
accumulated in float32 with a contiguous inner loop so LLVM can vectorize.
First call per shape class pays a JIT compile; cache=True persists the
compiled artifacts next to this module.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _conv2d_padded(xp, kernel, bias, stride, ho, wo):
    n = xp.shape[0]
    ci = xp.shape[1]
    co = kernel.shape[0]
    k = kernel.shape[2]
    out = np.empty((n, co, ho, wo), dtype=np.float32)
    # one task per output row keeps the pool balanced on small maps
    for idx in prange(n * co * ho):
        b = idx // (co * ho)
        rem = idx % (co * ho)
        o = rem // ho
        oy = rem % ho
        iy0 = oy * stride
        row = np.empty(wo, dtype=np.float32)
        for ox in range(wo):
            row[ox] = bias[o]
        for c in range(ci):
            for ky in range(k):
                xrow = xp[b, c, iy0 + ky]
                for kx in range(k):
                    wv = kernel[o, c, ky, kx]
                    if stride == 1:
                        for ox in range(wo):
                            row[ox] += wv * xrow[kx + ox]
                    else:
                        for ox in range(wo):
                            row[ox] += wv * xrow[kx + ox * stride]
        for ox in range(wo):
            out[b, o, oy, ox] = row[ox]
    return out


@njit(parallel=True, cache=True)
def _maxpool2d(x, k, stride, ho, wo):
    n = x.shape[0]
    c = x.shape[1]
    out = np.empty((n, c, ho, wo), dtype=np.float32)
    for idx in prange(n * c):
        b = idx // c
        ch = idx % c
        for oy in range(ho):
            iy0 = oy * stride
            for ox in range(wo):
                ix0 = ox * stride
                m = x[b, ch, iy0, ix0]
                for ky in range(k):
                    for kx in range(k):
                        v = x[b, ch, iy0 + ky, ix0 + kx]
                        if v > m:
                            m = v
                out[b, ch, oy, ox] = m
    return out


def conv2d(x, kernel, bias, stride, padding):
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = kernel.shape[2]
    ho = (x.shape[2] - k) // stride + 1
    wo = (x.shape[3] - k) // stride + 1
    return _conv2d_padded(
        np.ascontiguousarray(x), np.ascontiguousarray(kernel), bias, stride, ho, wo
    )


def maxpool2d(x, k, stride):
    ho = (x.shape[2] - k) // stride + 1
    wo = (x.shape[3] - k) // stride + 1
    return _maxpool2d(np.ascontiguousarray(x), k, stride, ho, wo)
