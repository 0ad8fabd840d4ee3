"""Numpy fallback for the 2-D convolution kernels.

Implements the same contract as the compiled extension: im2col gather, one
BLAS matmul, and a strided scatter-add for the input gradient. Used whenever
the extension is unavailable or explicitly disabled.
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride,
                                 j:j + stride * wo:stride]
    return cols, ho, wo


def conv2d_forward(x, w, stride=1, pad=0):
    """x: (N, C, H, W), w: (Co, C, KH, KW) -> (N, Co, Ho, Wo)."""
    n = x.shape[0]
    co, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    y = np.matmul(w.reshape(co, -1), cols)
    return y.reshape(n, co, ho, wo)


def conv2d_backward_x(dy, w, x_shape, stride=1, pad=0):
    """Gradient wrt the input; dy: (N, Co, Ho, Wo)."""
    n, c, h, w_in = x_shape
    co, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dcols = np.matmul(w.reshape(co, -1).T, dy.reshape(n, co, ho * wo))
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w_in + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride,
               j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w_in]
    return xp


def conv2d_backward_w(dy, x, w_shape, stride=1, pad=0):
    """Gradient wrt the weights; accumulated over the batch."""
    n = x.shape[0]
    co, c, kh, kw = w_shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    dy_mat = dy.reshape(n, co, ho * wo)
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, c, kh, kw)
