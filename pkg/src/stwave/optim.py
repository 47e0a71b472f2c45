"""Adam with L2 weight decay, and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from stwave.errors import ContractError, NumericalFault, ShapeError
from stwave.tensor import Tensor

# clipped norms land within float rounding of max_norm; re-clipping inside
# this band would rescale by ~1 ulp and break idempotence
CLIP_SLACK = 1e-6


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name, g in grads.items():
        sq = float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
        if not math.isfinite(sq):
            raise NumericalFault(f"non-finite gradient for parameter {name!r}")
        total += sq
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients by a common factor so their joint L2 norm is <= ``max_norm``.

    Returns ``(clipped, pre_clip_norm)``.  Gradients under the threshold are
    returned as the very same arrays.
    """
    if not max_norm > 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm * (1.0 + CLIP_SLACK):
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * g.dtype.type(scale) for name, g in grads.items()}, norm


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; weight decay is added to the gradient.

    Returns new parameter tensors (inputs are left untouched) and the
    advanced state.
    """
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        pd = p.data
        if state.weight_decay:
            g = g + state.weight_decay * pd
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(pd)
            v = np.zeros_like(pd)
        else:
            v = state.v[name]
            if m.shape != pd.shape:
                raise ShapeError(f"Adam moments for {name!r} have shape {m.shape}, parameter {pd.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        out[name] = Tensor((pd - update).astype(pd.dtype, copy=False), requires_grad=True, name=name)
    return out, state
