"""Pure-numpy implementations of the hot kernels.

Same signatures and conventions as the compiled ``_ckernels`` module; this
one is used when the extension is not built or ``STWAVE_KERNELS=numpy``.

Time-convolution convention: kernel tap ``k`` is the weight at lag ``k``,
so output position ``t`` reads ``x[..., t + (K - 1 - k) * dilation]`` and
corresponds to input position ``t + (K - 1) * dilation``.
"""

import numpy as np


def _taps(w):
    # contiguous (K, O, C); a strided w[:, :, k] view makes matmul skip BLAS
    return np.ascontiguousarray(np.moveaxis(w, 2, 0))


def conv_time_forward(x, w, bias, dilation):
    B, C, N, T = x.shape
    O, _, K = w.shape
    t_out = T - (K - 1) * dilation
    L = N * T
    xf = x.reshape(B, C, L)
    taps = _taps(w)
    full = np.matmul(taps[K - 1], xf)
    for k in range(K - 1):
        s = (K - 1 - k) * dilation
        full[:, :, :L - s] += np.matmul(taps[k], xf[:, :, s:])
    if bias is not None:
        full += bias[None, :, None]
    out = full.reshape(B, O, N, T)
    return out if t_out == T else np.ascontiguousarray(out[..., :t_out])


def conv_time_backward(x, w, grad_out, dilation, need_x=True):
    B, C, N, T = x.shape
    O, _, K = w.shape
    L = N * T
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if grad_out.shape[3] != T:
        g = np.zeros((B, O, N, T), dtype=x.dtype)
        g[..., :grad_out.shape[3]] = grad_out
    else:
        g = grad_out
    gf = g.reshape(B, O, L)
    xf = x.reshape(B, C, L)
    taps = _taps(w)
    grad_w = np.empty_like(w)
    grad_x = np.zeros((B, C, L), dtype=x.dtype) if need_x else None
    for k in range(K):
        s = (K - 1 - k) * dilation
        gs = gf[:, :, :L - s]
        grad_w[:, :, k] = np.matmul(gs, xf[:, :, s:].transpose(0, 2, 1)).sum(axis=0)
        if need_x:
            grad_x[:, :, s:] += np.matmul(np.ascontiguousarray(taps[k].T), gs)
    if need_x:
        grad_x = grad_x.reshape(B, C, N, T)
    return grad_x, grad_w, grad_b


def node_mix_forward(P, x):
    # out[b, c, i, t] = sum_j P[i, j] * x[b, c, j, t]
    return np.matmul(P, x)


def node_mix_backward(P, x, grad_out, need_x=True, need_p=True):
    grad_x = np.matmul(P.T, grad_out) if need_x else None
    grad_p = None
    if need_p:
        grad_p = np.tensordot(grad_out, x, axes=([0, 1, 3], [0, 1, 3]))
    return grad_x, grad_p
