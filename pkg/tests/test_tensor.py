import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stwave import tensor as T
from stwave.errors import ContractError, NumericalFault, ShapeError
from stwave.gradcheck import grad_check
from stwave.tensor import Tape, Tensor, backward, value_and_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_mul_gradients_by_hand():
    a, b = leaf([1.0, 2.0]), leaf([3.0, -4.0])
    with Tape() as tape:
        loss = T.sum_(a * b + a)
    backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [4.0, -3.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_broadcast_gradient_is_reduced_to_input_shape():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.arange(4.0))
    _, (ga, gb) = value_and_grad(lambda a, b: T.sum_(a * b), a, b)
    assert ga.shape == (3, 4) and gb.shape == (4,)
    np.testing.assert_array_equal(gb, [3.0, 3.0, 3.0, 3.0])


def test_fanout_accumulates():
    x = leaf([2.0])
    _, (g,) = value_and_grad(lambda x: T.sum_(x * x * x), x)
    assert g[0] == pytest.approx(12.0)


def test_no_tape_records_nothing():
    a = leaf([1.0])
    out = a * 2.0
    assert out._tape is None


def test_tape_is_consumed_and_reset():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        loss = T.sum_(a * a)
    backward(loss, tape)
    with pytest.raises(ContractError):
        backward(loss, tape)
    tape.reset()
    with tape:
        loss = T.sum_(a * 3.0)
    backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])


def test_backward_needs_scalar():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        out = a * 2.0
    with pytest.raises(ContractError):
        backward(out, tape)


def test_watched_but_unused_leaf_gets_zero_grad():
    a, b = leaf([1.0]), leaf([5.0, 6.0])
    with Tape() as tape:
        tape.watch(b)
        loss = T.sum_(a * 2.0)
    backward(loss, tape)
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_nonfinite_output_raises():
    with pytest.raises(NumericalFault), np.errstate(divide="ignore"):
        T.div(leaf([1.0]), leaf([0.0]))
    with T.finite_checks(False), np.errstate(divide="ignore"):
        out = T.div(leaf([1.0]), leaf([0.0]))
    assert np.isinf(out.data[0])


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_conv_time_rejects_short_window():
    x = leaf(np.ones((1, 1, 1, 2)))
    w = leaf(np.ones((1, 1, 1, 2)))
    with pytest.raises(ShapeError, match="requires T >= 3"):
        T.conv_time(x, w, None, dilation=2)


def test_dropout_eval_is_identity_and_train_is_inverted(rng):
    x = leaf(np.ones((2000,)))
    assert T.dropout(x, 0.3, None, training=False) is x
    out = T.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.7)
    assert abs(out.mean() - 1.0) < 0.05


def test_softmax_rows_sum_to_one(rng):
    x = leaf(rng.standard_normal((5, 7)))
    np.testing.assert_allclose(T.softmax(x, axis=1).data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_batch_norm_eval_uses_running_stats(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 5)))
    g, b = leaf(np.ones(3)), leaf(np.zeros(3))
    rm, rv = np.full(3, 0.5), np.full(3, 4.0)
    out = T.batch_norm(x, g, b, rm, rv, training=False)
    np.testing.assert_allclose(out.data, (x.data - 0.5) / np.sqrt(4.0 + 1e-5))


@pytest.mark.parametrize("name,fn", [
    ("tanh", T.tanh), ("sigmoid", T.sigmoid), ("exp", T.exp), ("square", T.square),
])
def test_smooth_unary_gradcheck(name, fn, rng):
    x = leaf(rng.uniform(-1, 1, (3, 4)))
    assert grad_check(lambda x: T.sum_(fn(x) * 1.3), [x]) <= 1e-7


finite = st.floats(-5, 5, allow_nan=False, width=64)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_linearity_of_gradients(a, b):
    # d/dx sum(a*x + b) = a regardless of x
    x = leaf(np.ones((3, 4)))
    _, (g,) = value_and_grad(lambda x: T.sum_(T.add(T.mul(x, Tensor(a)), Tensor(b))), x)
    np.testing.assert_array_equal(g, a)


@given(arrays(np.float64, (2, 3, 4), elements=finite), st.permutations([0, 1, 2]))
def test_transpose_reshape_roundtrip_gradient_is_identity(a, perm):
    x = leaf(a)
    inv = tuple(np.argsort(perm))
    _, (g,) = value_and_grad(
        lambda x: T.sum_(T.reshape(T.transpose(T.transpose(x, tuple(perm)), inv), (24,)) * Tensor(a.ravel())), x)
    np.testing.assert_array_equal(g, a)
