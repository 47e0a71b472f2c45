"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  While a :class:`Tape` is active
(``with Tape() as tape:``) every operation touching a ``requires_grad``
tensor appends a record ``(input ids, output id, backward rule)``; records
are appended in execution order, so the list is topologically sorted by
construction.  :func:`backward` walks it in reverse.

Without an active tape nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from stwave import kernels
from stwave.errors import ContractError, NumericalFault, ShapeError

_tape_stack: list["Tape"] = []
_check_finite = True
_kink_monitor: list[float] | None = None


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable or disable the per-operation NaN/Inf check."""
    global _check_finite
    previous = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = previous


@contextlib.contextmanager
def kink_monitor():
    """Collect the smallest |input| seen by relu/abs while active.

    Yields a list that receives one float per kinked operation.
    """
    global _kink_monitor
    previous = _kink_monitor
    seen: list[float] = []
    _kink_monitor = seen
    try:
        yield seen
    finally:
        _kink_monitor = previous


def _all_finite(a: np.ndarray) -> bool:
    if a.size == 0:
        return True
    # a finite sum is a cheap sufficient test; fall back to the exact one
    if math.isfinite(float(a.sum())):
        return True
    return bool(np.isfinite(a).all())


class Tensor:
    """Immutable dense array of f32 or f64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "tape_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _check_finite and not _all_finite(arr):
            raise NumericalFault(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of differentiable operations and their gradient buffers."""

    def __init__(self):
        self.records: list[tuple] = []
        self.leaves: dict[int, Tensor] = {}
        self.grads: dict[int, np.ndarray] = {}
        self.consumed = False
        self._next_id = 0

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def reset(self):
        for leaf in self.leaves.values():
            leaf._tape = None
            leaf.tape_id = None
        self.records.clear()
        self.leaves.clear()
        self.grads.clear()
        self.consumed = False
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _track(self, t: Tensor):
        if not t.requires_grad:
            return None
        if t._tape is not self:
            t._tape = self
            t.tape_id = self._new_id()
            self.leaves[t.tape_id] = t
        return t.tape_id

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf of this tape (it must require grad)."""
        if not t.requires_grad:
            raise ContractError("only requires_grad tensors can be watched")
        return self._track(t)


def current_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if _check_finite and not _all_finite(data):
        raise NumericalFault(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out.tape_id = None
    out._tape = None
    tape = current_tape()
    if tape is not None and not tape.consumed:
        ids = [tape._track(t) for t in inputs]
        if any(i is not None for i in ids):
            out.requires_grad = True
            out._tape = tape
            out.tape_id = tape._new_id()
            needs = tuple(i is not None for i in ids)
            tape.records.append((ids, out.tape_id, needs, rule, op))
    return out


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def rule(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def rule(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _emit(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _emit(ad * bd, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data

    def rule(g, needs):
        return (_unbroadcast(g / bd, ad.shape) if needs[0] else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if needs[1] else None)

    return _emit(ad / bd, (a, b), rule, "div")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g, needs: (-g,), "neg")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def relu(a: Tensor) -> Tensor:
    x = a.data
    if _kink_monitor is not None and x.size:
        _kink_monitor.append(float(np.abs(x).min()))
    pos = x > 0
    return _emit(np.maximum(x, 0), (a,), lambda g, needs: (g * pos,), "relu")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    if _kink_monitor is not None and x.size:
        _kink_monitor.append(float(np.abs(x).min()))
    sign = np.sign(x)
    return _emit(np.abs(x), (a,), lambda g, needs: (g * sign,), "abs")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    y = y.astype(a.dtype, copy=False)
    return _emit(y, (a,), lambda g, needs: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g, needs: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g, needs: (g * y,), "exp")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g, needs: (2.0 * g * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _emit(y, (a,), lambda g, needs: (0.5 * g / y,), "sqrt")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g, needs):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (a,), rule, "softmax")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "abs": abs_, "exp": exp,
          "neg": neg, "square": square, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b=None, axis: int = -1) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op_kind in _BINARY:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in ("softmax", "softmax_over_axis"):
        return softmax(a, axis)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ContractError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def rule(g, needs):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if needs[1] else None
        return ga, gb

    return _emit(ad @ bd, (a, b), rule, "matmul")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def rule(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _emit(out, (a,), lambda g, needs: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g, needs: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g, needs):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tensors, rule, "concat")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def index_select(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(index)

    def rule(g, needs):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(out, copy=True), (a,), rule, "index")


def slice_axis(a: Tensor, axis: int, start: int, stop: int | None = None) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return index_select(a, tuple(idx))


def pad(a: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is a per-axis sequence of (before, after)."""
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, n + lo) for (lo, _), n in zip(widths, a.shape))
    return _emit(np.pad(a.data, widths), (a,), lambda g, needs: (g[crop],), "pad")


# ---------------------------------------------------------------- constructors

def zeros(shape, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad, name)


def constant(shape, value, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad, name)


def uniform(shape, low, high, rng: np.random.Generator, dtype=np.float64,
            requires_grad=True, name=None) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape).astype(dtype), requires_grad, name)


def normal(shape, std, rng: np.random.Generator, dtype=np.float64,
           requires_grad=True, name=None) -> Tensor:
    return Tensor((rng.standard_normal(size=shape) * std).astype(dtype), requires_grad, name)


# ---------------------------------------------------------------- network ops

def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) so evaluation is the identity."""
    if not training or p == 0:
        return a
    if not 0 <= p < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("training-mode dropout needs a generator")
    u = rng.random(a.shape, dtype=np.float32 if a.dtype == np.float32 else np.float64)
    keep = np.where(u >= p, a.dtype.type(1.0 / (1.0 - p)), a.dtype.type(0.0))
    return _emit(a.data * keep, (a,), lambda g, needs: (g * keep,), "dropout")


def conv_time(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dilated causal convolution along the last (time) axis.

    ``x`` is (B, C_in, N, T) and ``w`` is (C_out, C_in, 1, K); tap ``k`` of
    ``w`` weights the input ``k * dilation`` steps older than the newest
    contributing one.  Output is (B, C_out, N, T - (K-1)*dilation) and output
    position ``t`` aligns with input position ``t + (K-1)*dilation``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv_time input must be (B, C, N, T), got {x.shape}")
    if w.ndim != 4 or w.shape[2] != 1:
        raise ShapeError(f"conv_time weight must be (C_out, C_in, 1, K), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv_time: weight {w.shape} expects {w.shape[1]} input channels, "
                         f"input {x.shape} has {x.shape[1]}")
    if dilation < 1:
        raise ContractError(f"dilation must be >= 1, got {dilation}")
    O, C, _, K = w.shape
    need = (K - 1) * dilation + 1
    if x.shape[3] < need:
        raise ShapeError(f"conv_time: window of {x.shape[3]} steps too short, "
                         f"kernel {K} at dilation {dilation} requires T >= {need}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv_time bias must be ({O},), got {b.shape}")
    w3 = w.data.reshape(O, C, K)
    xd = x.data
    out = kernels.conv_time_forward(xd, w3, None if b is None else b.data, dilation)

    def rule(g, needs):
        gx, gw, gb = kernels.conv_time_backward(xd, w3, g, dilation, need_x=needs[0])
        grads = [gx, gw.reshape(O, C, 1, K)]
        if b is not None:
            grads.append(gb)
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, rule, "conv_time")


def node_mix(P: Tensor, x: Tensor) -> Tensor:
    """Apply an (N, N) matrix along the node axis: out[b,c,i,t] = sum_j P[i,j] x[b,c,j,t]."""
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ShapeError(f"support must be square, got {P.shape}")
    if x.ndim != 4 or x.shape[2] != P.shape[0]:
        raise ShapeError(f"support {P.shape} does not match node axis of input {x.shape}")
    pd, xd = P.data, x.data
    if pd.dtype != xd.dtype:
        pd = pd.astype(xd.dtype)

    def rule(g, needs):
        gx, gp = kernels.node_mix_backward(pd, xd, g, need_x=needs[0], need_p=needs[1])
        if gp is not None:
            gp = gp.astype(P.dtype, copy=False)
        return gx, gp

    return _emit(kernels.node_mix_forward(pd, xd), (x, P), rule, "node_mix")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a (B, C, N, T) tensor over (B, N, T).

    Training mode uses batch statistics and updates the running buffers in
    place; evaluation mode uses the running buffers.
    """
    axes = (0, 2, 3)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        m = xd.size // xd.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * m / max(m - 1, 1)
    else:
        mu = running_mean.reshape(1, -1, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, -1, 1, 1).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(1, -1, 1, 1)
    out = (xhat * gd + beta.data.reshape(1, -1, 1, 1)).astype(xd.dtype, copy=False)

    def rule(g, needs):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if needs[0]:
            gxhat = g * gd
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv
        return gx, ggamma, gbeta

    return _emit(out, (x, gamma, beta), rule, "batch_norm")


# ---------------------------------------------------------------- differentiation

def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns gradients keyed by tape id for every leaf on the tape and also
    stores each in ``leaf.grad``.  The tape is consumed; ``tape.reset()``
    makes it reusable.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if tape.consumed:
        raise ContractError("tape already consumed; call reset() before reuse")
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for ids, out_id, needs, rule, _op in reversed(tape.records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for tid, gi in zip(ids, rule(g, needs)):
            if tid is None or gi is None:
                continue
            prev = grads.get(tid)
            grads[tid] = gi if prev is None else prev + gi
    result = {}
    for tid, leaf in tape.leaves.items():
        gl = grads.get(tid)
        if gl is None:
            gl = np.zeros_like(leaf.data)
        else:
            gl = np.asarray(gl, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = gl
        result[tid] = gl
    tape.grads = result
    tape.consumed = True
    return result


def value_and_grad(f: Callable[..., Tensor], *inputs: Tensor):
    """Evaluate ``f(*inputs)`` on a fresh tape; return (value, [grad per input])."""
    with Tape() as tape:
        for t in inputs:
            if not t.requires_grad:
                t.requires_grad = True
        loss = f(*inputs)
    backward(loss, tape)
    return loss.item(), [t.grad for t in inputs]
