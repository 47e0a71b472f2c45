import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv_time_loop
from stwave import _pykernels, kernels
from stwave import tensor as T
from stwave.tensor import Tensor

BACKENDS = kernels.available_backends()


def test_active_backend_is_named():
    assert kernels.BACKEND in BACKENDS


def _case(seed, B, C, O, N, T_, K, d, dtype=np.float64):
    g = np.random.default_rng(seed)
    x = g.standard_normal((B, C, N, T_)).astype(dtype)
    w = g.standard_normal((O, C, 1, K)).astype(dtype)
    b = g.standard_normal(O).astype(dtype)
    return x, w, b


@pytest.mark.parametrize("K,d", [(1, 1), (2, 1), (2, 2), (3, 2), (2, 4)])
def test_conv_matches_index_loop_oracle(K, d):
    x, w, b = _case(K * 10 + d, 2, 3, 4, 3, 9, K, d)
    out = T.conv_time(Tensor(x), Tensor(w), Tensor(b), d).data
    np.testing.assert_allclose(out, conv_time_loop(x, w, b, d), rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(seed=st.integers(0, 10_000), K=st.integers(1, 3), d=st.integers(1, 3), extra=st.integers(0, 4))
def test_backends_agree_with_oracle(name, seed, K, d, extra):
    impl = BACKENDS[name]
    T_ = (K - 1) * d + 1 + extra
    x, w, b = _case(seed, 2, 2, 3, 2, T_, K, d)
    out = impl.conv_time_forward(x, np.ascontiguousarray(w[:, :, 0]), b, d)
    np.testing.assert_allclose(out, conv_time_loop(x, w, b, d), rtol=0, atol=1e-12)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_compiled_and_numpy_backends_agree(dtype, tol):
    if "cython" not in BACKENDS:
        pytest.skip("compiled backend not built")
    c, p = BACKENDS["cython"], BACKENDS["numpy"]
    x, w, b = _case(3, 3, 5, 6, 7, 13, 2, 2, dtype)
    w3 = np.ascontiguousarray(w[:, :, 0])
    fc, fp = c.conv_time_forward(x, w3, b, 2), p.conv_time_forward(x, w3, b, 2)
    np.testing.assert_allclose(fc, fp, rtol=tol, atol=tol)
    g = np.random.default_rng(0).standard_normal(fc.shape).astype(dtype)
    for a, e in zip(c.conv_time_backward(x, w3, g, 2, True), p.conv_time_backward(x, w3, g, 2, True)):
        np.testing.assert_allclose(a, e, rtol=tol, atol=tol)
    P = np.random.default_rng(1).random((7, 7)).astype(dtype)
    np.testing.assert_allclose(c.node_mix_forward(P, x), p.node_mix_forward(P, x), rtol=tol, atol=tol)
    for a, e in zip(c.node_mix_backward(P, x, x, True, True), p.node_mix_backward(P, x, x, True, True)):
        np.testing.assert_allclose(a, e, rtol=tol, atol=tol)


def test_conv_backward_is_adjoint_of_forward():
    # <conv(x), g> = <x, conv^T(g)> and linear in w
    x, w, b = _case(7, 2, 3, 4, 2, 10, 2, 3)
    w3 = np.ascontiguousarray(w[:, :, 0])
    y = _pykernels.conv_time_forward(x, w3, None, 3)
    g = np.random.default_rng(8).standard_normal(y.shape)
    gx, gw, gb = _pykernels.conv_time_backward(x, w3, g, 3, True)
    assert np.vdot(y, g) == pytest.approx(np.vdot(x, gx), rel=1e-12)
    assert np.vdot(y, g) == pytest.approx(np.vdot(w3, gw), rel=1e-12)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


def test_node_mix_matches_einsum():
    g = np.random.default_rng(2)
    P, x = g.random((5, 5)), g.standard_normal((2, 3, 5, 4))
    out = T.node_mix(Tensor(P), Tensor(x)).data
    np.testing.assert_allclose(out, np.einsum("ij,bcjt->bcit", P, x), rtol=0, atol=1e-12)
