# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: dilated causal time convolution and node-axis mixing.

Mirrors ``_pykernels`` exactly in signature and convention.  Loops run
single-threaded in a fixed order, so results are deterministic.

The time convolution treats each batch entry as a (channel, node*time)
row-major matrix and runs every tap as one BLAS GEMM against a view
shifted by ``s`` time steps; positions that wrap across a node row land in
the cropped tail (forward) or read zero padding (backward).  No slice of
the input is ever copied.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline void _axpy(real* dst, const real* src, real a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(n):
        dst[j] += a * src[j]


cdef inline double _dot(const real* a, const real* b, Py_ssize_t n) noexcept nogil:
    # eight independent partial sums in a fixed order: vectorizable and deterministic
    cdef Py_ssize_t j, m = n - n % 8
    cdef real p0 = 0, p1 = 0, p2 = 0, p3 = 0, p4 = 0, p5 = 0, p6 = 0, p7 = 0
    cdef double acc
    for j in range(0, m, 8):
        p0 += a[j] * b[j]
        p1 += a[j + 1] * b[j + 1]
        p2 += a[j + 2] * b[j + 2]
        p3 += a[j + 3] * b[j + 3]
        p4 += a[j + 4] * b[j + 4]
        p5 += a[j + 5] * b[j + 5]
        p6 += a[j + 6] * b[j + 6]
        p7 += a[j + 7] * b[j + 7]
    acc = (<double>p0 + p1) + (<double>p2 + p3) + ((<double>p4 + p5) + (<double>p6 + p7))
    for j in range(m, n):
        acc += a[j] * b[j]
    return acc


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k, real* a, int lda,
                       real* b, int ldb, real beta, real* c, int ldc) noexcept nogil:
    # column-major BLAS; callers pass row-major operands transposed
    cdef real one = 1
    if real is float:
        sgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


def conv_time_forward(real[:, :, :, ::1] x, real[:, :, ::1] w, bias, int dilation):
    """Each tap is one GEMM per batch entry accumulating into a shifted output view."""
    cdef int B = x.shape[0], C = x.shape[1], N = x.shape[2], T = x.shape[3]
    cdef int O = w.shape[0], K = w.shape[2]
    cdef int t_out = T - (K - 1) * dilation
    cdef int L = N * T
    cdef int b, o, k, s, j
    dtype = np.asarray(x).dtype
    taps_arr = np.ascontiguousarray(np.moveaxis(np.asarray(w), 2, 0))    # (K, O, C)
    cdef real[:, :, ::1] taps = taps_arr
    full_arr = np.empty((B, O, L), dtype=dtype)
    cdef real[:, :, ::1] full = full_arr
    cdef real[::1] bias_v
    cdef bint has_bias = bias is not None
    cdef real bv
    if has_bias:
        bias_v = bias
    with nogil:
        for b in range(B):
            for o in range(O):
                bv = bias_v[o] if has_bias else 0
                for j in range(L):
                    full[b, o, j] = bv
            for k in range(K):
                s = (K - 1 - k) * dilation
                # out[b][:, :L-s] += W_k @ x[b][:, s:]
                _gemm(b"N", b"N", L - s, O, C, &x[b, 0, 0, s], L, &taps[k, 0, 0], C,
                      1, &full[b, 0, 0], L)
    out = full_arr.reshape(B, O, N, T)
    if t_out == T:
        return out
    return np.ascontiguousarray(out[..., :t_out])


def conv_time_backward(real[:, :, :, ::1] x, real[:, :, ::1] w,
                       grad_out, int dilation, bint need_x=True):
    cdef int B = x.shape[0], C = x.shape[1], N = x.shape[2], T = x.shape[3]
    cdef int O = w.shape[0], K = w.shape[2]
    cdef int L = N * T
    cdef int b, k, s
    dtype = np.asarray(x).dtype
    g_arr = np.asarray(grad_out)
    grad_b = g_arr.sum(axis=(0, 2, 3))
    if g_arr.shape[3] != T:
        # zero tail so wrapped positions contribute nothing
        padded = np.zeros((B, O, N, T), dtype=dtype)
        padded[..., :g_arr.shape[3]] = g_arr
        g_arr = padded
    else:
        g_arr = np.ascontiguousarray(g_arr, dtype=dtype)
    cdef real[:, :, :, ::1] g = g_arr
    taps_arr = np.ascontiguousarray(np.moveaxis(np.asarray(w), 2, 0))    # (K, O, C)
    cdef real[:, :, ::1] taps = taps_arr
    gtaps_arr = np.zeros((K, O, C), dtype=dtype)
    cdef real[:, :, ::1] gtaps = gtaps_arr
    cdef real[:, :, :, ::1] gx
    gx_arr = None
    if need_x:
        gx_arr = np.zeros((B, C, N, T), dtype=dtype)
        gx = gx_arr
    with nogil:
        for b in range(B):
            for k in range(K):
                s = (K - 1 - k) * dilation
                # dW_k += g[b][:, :L-s] @ x[b][:, s:]^T
                _gemm(b"T", b"N", C, O, L - s, &x[b, 0, 0, s], L, &g[b, 0, 0, 0], L,
                      1, &gtaps[k, 0, 0], C)
                if need_x:
                    # dx[b][:, s:] += W_k^T @ g[b][:, :L-s]
                    _gemm(b"N", b"T", L - s, C, O, &g[b, 0, 0, 0], L, &taps[k, 0, 0], C,
                          1, &gx[b, 0, 0, s], L)
    return gx_arr, np.ascontiguousarray(np.moveaxis(gtaps_arr, 0, 2)), grad_b


def node_mix_forward(real[:, ::1] P, real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], N = x.shape[2], T = x.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef real p
    out_arr = np.zeros((B, C, N, T), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(N):
                    for j in range(N):
                        p = P[i, j]
                        if p != 0:
                            _axpy(&out[b, c, i, 0], &x[b, c, j, 0], p, T)
    return out_arr


def node_mix_backward(real[:, ::1] P, real[:, :, :, ::1] x, real[:, :, :, ::1] grad_out,
                      bint need_x=True, bint need_p=True):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], N = x.shape[2], T = x.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef real p
    dtype = np.asarray(x).dtype
    cdef real[:, :, :, ::1] gx
    cdef double[:, ::1] gp
    gx_arr = None
    gp64 = np.zeros((N, N), dtype=np.float64)
    gp = gp64
    if need_x:
        gx_arr = np.zeros((B, C, N, T), dtype=dtype)
        gx = gx_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(N):
                    for j in range(N):
                        if need_p:
                            gp[i, j] += _dot(&grad_out[b, c, i, 0], &x[b, c, j, 0], T)
                        if need_x:
                            p = P[i, j]
                            if p != 0:
                                _axpy(&gx[b, c, j, 0], &grad_out[b, c, i, 0], p, T)
    return gx_arr, (gp64.astype(dtype) if need_p else None)
