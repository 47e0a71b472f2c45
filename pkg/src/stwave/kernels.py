"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when importable; otherwise the
numpy implementation in ``_pykernels``.  ``STWAVE_KERNELS=numpy`` forces the
fallback.  ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from stwave import _pykernels

_forced = os.environ.get("STWAVE_KERNELS", "").strip().lower()

if _forced in ("numpy", "python", "py"):
    _impl = _pykernels
else:
    try:
        from stwave import _ckernels as _impl
    except ImportError:
        if _forced in ("cython", "c"):
            raise
        _impl = _pykernels

BACKEND = "numpy" if _impl is _pykernels else "cython"


def available_backends():
    """Map backend name to kernel module for every importable implementation."""
    found = {"numpy": _pykernels}
    try:
        from stwave import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found


def _c(a):
    return np.ascontiguousarray(a)


def conv_time_forward(x, w, bias, dilation):
    return _impl.conv_time_forward(_c(x), _c(w), None if bias is None else _c(bias), int(dilation))


def conv_time_backward(x, w, grad_out, dilation, need_x=True):
    return _impl.conv_time_backward(_c(x), _c(w), _c(grad_out), int(dilation), need_x)


# The compiled node_mix loses to numpy's batched matmul at every density
# measured (benchmarks/bench_kernels.py), so node mixing always takes the
# numpy path; the compiled version is kept for parity tests and benchmarks.
def _node_impl(P, need_p=False):
    return _pykernels


def node_mix_forward(P, x):
    return _node_impl(P).node_mix_forward(_c(P), _c(x))


def node_mix_backward(P, x, grad_out, need_x=True, need_p=True):
    impl = _node_impl(P, need_p)
    return impl.node_mix_backward(_c(P), _c(x), _c(grad_out), need_x, need_p)
