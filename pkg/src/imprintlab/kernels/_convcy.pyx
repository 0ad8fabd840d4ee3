# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels: batched C im2col/col2im around one BLAS GEMM.

The whole minibatch is packed into a single (K, N*P) buffer so each call
issues one large GEMM instead of N small ones; scatter/gather loops run in C.
Results are deterministic for fixed inputs and match the numpy fallback to
float rounding."""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _rm_gemm(int transa, int transb, int m, int n, int k, real* a,
                   int lda, real* b, int ldb, real beta, real* c,
                   int ldc) noexcept nogil:
    # C(m,n) = op(A) @ op(B) + beta*C for ROW-major arrays, by computing the
    # column-major product C^T = op(B)^T op(A)^T.
    cdef real alpha = 1.0
    cdef char ta = b'N' if transa == 0 else b'T'
    cdef char tb = b'N' if transb == 0 else b'T'
    if real is float:
        sgemm(&tb, &ta, &n, &m, &k, <float*>&alpha, <float*>b, &ldb,
              <float*>a, &lda, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(&tb, &ta, &n, &m, &k, <double*>&alpha, <double*>b, &ldb,
              <double*>a, &lda, <double*>&beta, <double*>c, &ldc)


cdef inline int _ow_lo(int j, int pad, int stride) noexcept nogil:
    # smallest ow with ow*stride + j - pad >= 0
    if j >= pad:
        return 0
    return (pad - j + stride - 1) // stride


cdef inline int _ow_hi(int j, int pad, int stride, int w, int wo) noexcept nogil:
    # one past the largest valid ow with ow*stride + j - pad <= w - 1
    cdef int hi = (w - 1 + pad - j) // stride + 1
    if hi > wo:
        hi = wo
    if hi < 0:
        hi = 0
    return hi


cdef void _pack(real[:, :, :, ::1] x, real[:, ::1] cols, int n,
                int c, int h, int w, int kh, int kw, int ho, int wo,
                int stride, int pad, int col0) noexcept nogil:
    cdef int ci, i, j, oh, ow, ih, row, base, lo, hi, off
    cdef real* src
    cdef real* dst
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                lo = _ow_lo(j, pad, stride)
                hi = _ow_hi(j, pad, stride, w, wo)
                off = j - pad
                for oh in range(ho):
                    ih = oh * stride + i - pad
                    dst = &cols[row, col0 + oh * wo]
                    if ih < 0 or ih >= h:
                        for ow in range(wo):
                            dst[ow] = 0
                        continue
                    for ow in range(lo):
                        dst[ow] = 0
                    src = &x[n, ci, ih, 0]
                    if stride == 1:
                        for ow in range(lo, hi):
                            dst[ow] = src[ow + off]
                    else:
                        for ow in range(lo, hi):
                            dst[ow] = src[ow * stride + off]
                    for ow in range(hi, wo):
                        dst[ow] = 0


cdef void _unpack_add(real[:, ::1] cols, real[:, :, :, ::1] dx, int n,
                      int c, int h, int w, int kh, int kw, int ho, int wo,
                      int stride, int pad, int col0) noexcept nogil:
    cdef int ci, i, j, oh, ow, ih, row, lo, hi, off
    cdef real* src
    cdef real* dst
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                lo = _ow_lo(j, pad, stride)
                hi = _ow_hi(j, pad, stride, w, wo)
                off = j - pad
                for oh in range(ho):
                    ih = oh * stride + i - pad
                    if ih < 0 or ih >= h:
                        continue
                    src = &cols[row, col0 + oh * wo]
                    dst = &dx[n, ci, ih, 0]
                    if stride == 1:
                        for ow in range(lo, hi):
                            dst[ow + off] += src[ow]
                    else:
                        for ow in range(lo, hi):
                            dst[ow * stride + off] += src[ow]


def conv2d_forward(x_arr, w_arr, int stride=1, int pad=0):
    x_arr = np.ascontiguousarray(x_arr)
    w_arr = np.ascontiguousarray(w_arr)
    return _forward(x_arr, w_arr, stride, pad)


def conv2d_backward_x(dy_arr, w_arr, x_shape, int stride=1, int pad=0):
    dy_arr = np.ascontiguousarray(dy_arr)
    w_arr = np.ascontiguousarray(w_arr)
    return _backward_x(dy_arr, w_arr, tuple(x_shape), stride, pad)


def conv2d_backward_w(dy_arr, x_arr, w_shape, int stride=1, int pad=0):
    dy_arr = np.ascontiguousarray(dy_arr)
    x_arr = np.ascontiguousarray(x_arr)
    return _backward_w(dy_arr, x_arr, tuple(w_shape), stride, pad)


def _forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, int stride, int pad):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wi + 2 * pad - kw) // stride + 1
    cdef int k = c * kh * kw, p = ho * wo
    dtype = np.float32 if real is float else np.float64
    cols_np = np.empty((k, n * p), dtype=dtype)
    yt_np = np.empty((co, n * p), dtype=dtype)
    y_np = np.empty((n, co, ho, wo), dtype=dtype)
    cdef real[:, ::1] cols = cols_np
    cdef real[:, ::1] yt = yt_np
    cdef real[:, :, :, ::1] y = y_np
    cdef int bn, oc, oh, ow
    cdef real beta = 0.0
    with nogil:
        for bn in range(n):
            _pack(x, cols, bn, c, h, wi, kh, kw, ho, wo, stride, pad, bn * p)
        # yt (co, n*p) = W (co, k) @ cols (k, n*p)
        _rm_gemm(0, 0, co, n * p, k, &w[0, 0, 0, 0], k,
                 &cols[0, 0], n * p, beta, &yt[0, 0], n * p)
        for bn in range(n):
            for oc in range(co):
                for oh in range(ho):
                    for ow in range(wo):
                        y[bn, oc, oh, ow] = yt[oc, bn * p + oh * wo + ow]
    return y_np


def _backward_x(real[:, :, :, ::1] dy, real[:, :, :, ::1] w, x_shape,
                int stride, int pad):
    cdef int n = x_shape[0], c = x_shape[1], h = x_shape[2], wi = x_shape[3]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = dy.shape[2], wo = dy.shape[3]
    cdef int k = c * kh * kw, p = ho * wo
    dtype = np.float32 if real is float else np.float64
    dyt_np = np.empty((co, n * p), dtype=dtype)
    dcols_np = np.empty((k, n * p), dtype=dtype)
    dx_np = np.zeros((n, c, h, wi), dtype=dtype)
    cdef real[:, ::1] dyt = dyt_np
    cdef real[:, ::1] dcols = dcols_np
    cdef real[:, :, :, ::1] dx = dx_np
    cdef int bn, oc, oh, ow
    cdef real beta = 0.0
    with nogil:
        for bn in range(n):
            for oc in range(co):
                for oh in range(ho):
                    for ow in range(wo):
                        dyt[oc, bn * p + oh * wo + ow] = dy[bn, oc, oh, ow]
        # dcols (k, n*p) = W^T (k, co) @ dyt (co, n*p)
        _rm_gemm(1, 0, k, n * p, co, &w[0, 0, 0, 0], k,
                 &dyt[0, 0], n * p, beta, &dcols[0, 0], n * p)
        for bn in range(n):
            _unpack_add(dcols, dx, bn, c, h, wi, kh, kw, ho, wo, stride, pad,
                        bn * p)
    return dx_np


def _backward_w(real[:, :, :, ::1] dy, real[:, :, :, ::1] x, w_shape,
                int stride, int pad):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef int co = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef int ho = dy.shape[2], wo = dy.shape[3]
    cdef int k = c * kh * kw, p = ho * wo
    dtype = np.float32 if real is float else np.float64
    cols_np = np.empty((k, n * p), dtype=dtype)
    dyt_np = np.empty((co, n * p), dtype=dtype)
    dw_np = np.zeros((co, k), dtype=dtype)
    cdef real[:, ::1] cols = cols_np
    cdef real[:, ::1] dyt = dyt_np
    cdef real[:, ::1] dw = dw_np
    cdef int bn, oc, oh, ow
    cdef real beta = 0.0
    with nogil:
        for bn in range(n):
            _pack(x, cols, bn, c, h, wi, kh, kw, ho, wo, stride, pad, bn * p)
            for oc in range(co):
                for oh in range(ho):
                    for ow in range(wo):
                        dyt[oc, bn * p + oh * wo + ow] = dy[bn, oc, oh, ow]
        # dw (co, k) = dyt (co, n*p) @ cols^T (n*p, k)
        _rm_gemm(0, 1, co, k, n * p, &dyt[0, 0], n * p,
                 &cols[0, 0], n * p, beta, &dw[0, 0], k)
    return dw_np.reshape(co, c, kh, kw)
