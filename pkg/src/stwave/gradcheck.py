"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from stwave.tensor import Tape, Tensor, backward, kink_monitor


def relative_error(g: np.ndarray, g_hat: np.ndarray) -> np.ndarray:
    return np.abs(g - g_hat) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(g_hat)))


def _as_list(inputs) -> list[Tensor]:
    if isinstance(inputs, Tensor):
        return [inputs]
    return list(inputs)


def _evaluate(f, arrays) -> float:
    return float(f(*[Tensor(a) for a in arrays]).data.reshape(()))


def kink_margin(f: Callable[..., Tensor], inputs) -> float:
    """Smallest |pre-activation| seen by any relu/abs while evaluating ``f``."""
    with kink_monitor() as seen:
        f(*[Tensor(t.data) for t in _as_list(inputs)])
    return min(seen) if seen else float("inf")


def grad_check(f: Callable[..., Tensor], inputs, eps: float = 1e-5,
               resample: Callable[[int], Sequence[Tensor]] | None = None,
               max_resamples: int = 20) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar.  If ``resample`` is given and a
    relu/abs input lies within ``10 * eps`` of its kink, fresh inputs are
    drawn from ``resample(attempt)`` until the margin holds.
    """
    xs = _as_list(inputs)
    if resample is not None:
        attempt = 0
        while kink_margin(f, xs) <= 10 * eps:
            attempt += 1
            if attempt > max_resamples:
                raise RuntimeError("could not draw inputs away from activation kinks")
            xs = _as_list(resample(attempt))

    arrays = [np.array(t.data, dtype=np.float64) for t in xs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        for leaf in leaves:
            tape.watch(leaf)
        loss = f(*leaves)
    backward(loss, tape)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _evaluate(f, arrays)
            flat[i] = orig - eps
            down = _evaluate(f, arrays)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        if numeric.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


# named check suites -------------------------------------------------------

THRESHOLDS = {"ops": 1e-5, "layers": 1e-5, "model": 1e-4}


def _project(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar <out, R> with a fixed random R, so no gradient entry cancels by symmetry."""
    from stwave import tensor as T

    R = np.random.default_rng(seed).uniform(0.5, 1.5, out.shape)
    return T.sum_(T.mul(out, Tensor(R)))


def _op_cases():
    from stwave import tensor as T

    def rand(seed, *shape, low=-1.0, high=1.0):
        return Tensor(np.random.default_rng(seed).uniform(low, high, shape))

    def away_from_kinks(seed, *shape):
        x = np.random.default_rng(seed).uniform(0.2, 1.0, shape)
        return Tensor(x * np.where(np.random.default_rng(seed + 99).random(shape) < 0.5, -1, 1))

    P = rand(11, 5, 5, low=0.0, high=1.0)
    drop_rng = lambda: np.random.default_rng(3)  # noqa: E731
    gamma, beta = rand(12, 3, low=0.5, high=1.5), rand(13, 3)

    return [
        ("add", lambda a, b: T.add(a, b), [rand(1, 3, 4), rand(2, 4)]),
        ("sub", lambda a, b: T.sub(a, b), [rand(1, 3, 4), rand(2, 3, 1)]),
        ("mul", lambda a, b: T.mul(a, b), [rand(1, 3, 4), rand(2, 3, 4)]),
        ("div", lambda a, b: T.div(a, b), [rand(1, 3, 4), rand(2, 3, 4, low=0.5, high=2.0)]),
        ("neg", T.neg, [rand(1, 6)]),
        ("relu", T.relu, [away_from_kinks(1, 4, 5)]),
        ("abs", T.abs_, [away_from_kinks(2, 4, 5)]),
        ("sigmoid", T.sigmoid, [rand(3, 4, 5, low=-4, high=4)]),
        ("tanh", T.tanh, [rand(4, 4, 5, low=-3, high=3)]),
        ("exp", T.exp, [rand(5, 4, 5)]),
        ("square", T.square, [rand(6, 4, 5)]),
        ("sqrt", T.sqrt, [rand(7, 4, 5, low=0.5, high=2.0)]),
        ("softmax", lambda a: T.softmax(a, axis=1), [rand(8, 3, 5, low=-2, high=2)]),
        ("elementwise", lambda a, b: T.elementwise("mul", T.elementwise("tanh", a), b),
         [rand(9, 3, 4), rand(10, 3, 4)]),
        ("matmul", T.matmul, [rand(1, 5, 4), rand(2, 4, 3)]),
        ("matmul-batched", T.matmul, [rand(1, 2, 5, 4), rand(2, 4, 3)]),
        ("sum", lambda a: T.sum_(a, axis=1, keepdims=True), [rand(1, 3, 4, 2)]),
        ("mean", lambda a: T.mean(a, axis=(0, 2)), [rand(1, 3, 4, 2)]),
        ("reshape", lambda a: T.reshape(a, (4, 6)), [rand(1, 2, 3, 4)]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [rand(1, 2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [rand(1, 2, 3, 4), rand(2, 2, 2, 4)]),
        ("index_select", lambda a: T.index_select(a, (slice(None), [2, 0, 2])), [rand(1, 3, 4)]),
        ("slice_axis", lambda a: T.slice_axis(a, 2, 1, 3), [rand(1, 2, 3, 4)]),
        ("pad", lambda a: T.pad(a, ((0, 0), (0, 0), (0, 0), (2, 0))), [rand(1, 2, 3, 4, 5)]),
        ("dropout", lambda a: T.dropout(a, 0.3, drop_rng(), True), [rand(1, 4, 6)]),
        ("conv_time", lambda x, w, b: T.conv_time(x, w, b, dilation=2),
         [rand(1, 2, 3, 4, 13), rand(2, 2, 3, 1, 2), rand(3, 2)]),
        ("conv_time-k3", lambda x, w: T.conv_time(x, w, None, dilation=1),
         [rand(1, 2, 3, 4, 7), rand(2, 3, 3, 1, 3)]),
        ("node_mix", lambda p, x: T.node_mix(p, x), [P, rand(4, 2, 3, 5, 4)]),
        ("batch_norm", lambda x, g, b: T.batch_norm(x, g, b, np.zeros(3), np.ones(3), True),
         [rand(5, 2, 3, 4, 5), gamma, beta]),
    ]


def check_ops(log=None) -> list[tuple[str, float, float]]:
    results = []
    for name, op, inputs in _op_cases():
        err = grad_check(lambda *xs, op=op: _project(op(*xs)), inputs)
        results.append((f"op:{name}", err, THRESHOLDS["ops"]))
        if log:
            log(f"op:{name:<16} {err:.2e}")
    return results


def _tiny_layer_setup(seed=0, blocks=1, nodes=4, nhid=4, supports_mode="forward+backward+adaptive",
                      bypass=True, batch_norm=False):
    from stwave.model import GraphWaveNet, ModelConfig

    cfg = ModelConfig(n_nodes=nodes, nhid=nhid, n_blocks=blocks, precision="float64", horizons=12,
                      gcn_bypass_skip=bypass, supports_mode=supports_mode, batch_norm=batch_norm)
    gen = np.random.default_rng(seed)
    W = gen.uniform(0.1, 1.0, (nodes, nodes)) * (gen.random((nodes, nodes)) < 0.6)
    np.fill_diagonal(W, 1.0)
    return GraphWaveNet(cfg, W, seed=seed)


def _param_check(model, loss_of_params, names=None, resample_seeds=None):
    names = list(model.params) if names is None else names

    def f(*tensors):
        params = dict(model.params)
        params.update(zip(names, tensors))
        return loss_of_params(params)

    inputs = [Tensor(model.params[n].data) for n in names]

    def resample(attempt):
        fresh = type(model)(model.config, model.adjacency, seed=1000 + attempt)
        model.params = fresh.params
        return [Tensor(fresh.params[n].data) for n in names]

    return grad_check(f, inputs, resample=resample)


def check_layers(log=None) -> list[tuple[str, float, float]]:
    from stwave.model import build_support_tensors, diffusion_params, gated_tcn, layer_forward

    model = _tiny_layer_setup()
    cfg = model.config
    x = np.random.default_rng(5).normal(size=(2, cfg.nhid, cfg.n_nodes, 7))
    results = []

    def tcn(params):
        return _project(gated_tcn(Tensor(x), params, "layers.0.", 2))

    names = [n for n in model.params if n.startswith("layers.0.filter") or n.startswith("layers.0.gate")]
    results.append(("layer:gated_tcn", _param_check(model, tcn, names), 1e-6))

    from stwave.graph import diffusion_conv

    def diff(params):
        supports = build_support_tensors(params, model.fixed, cfg)
        return _project(diffusion_conv(Tensor(x), supports, diffusion_params(params, "layers.0.", cfg)))

    names = [n for n in model.params if ".gcn." in n and n.startswith("layers.0.")] + ["adaptive.src", "adaptive.dst"]
    results.append(("layer:diffusion_conv", _param_check(model, diff, names), 1e-5))
    xt = Tensor(x)
    results.append(("layer:diffusion_conv[x]", grad_check(
        lambda xx: _project(diffusion_conv(xx, build_support_tensors(model.params, model.fixed, cfg),
                                           diffusion_params(model.params, "layers.0.", cfg))), [xt]), 1e-5))

    def full(params):
        supports = build_support_tensors(params, model.fixed, cfg)
        y, skip = layer_forward(Tensor(x), params, supports, cfg, 0, training=True,
                                rng=np.random.default_rng(9))
        from stwave import tensor as T
        return T.add(_project(y, 1), _project(skip, 2))

    results.append(("layer:full", _param_check(model, full), 1e-5))
    if log:
        for name, err, tol in results:
            log(f"{name:<24} {err:.2e} (<= {tol:g})")
    return results


def check_model(log=None, seed=0) -> list[tuple[str, float, float]]:
    """End-to-end f64 check on the desk config (B=2, N=4, nhid=4, one block)."""
    from stwave.model import forward

    model = _tiny_layer_setup(seed)
    cfg = model.config
    xb = np.random.default_rng(seed + 1).normal(size=(2, cfg.n_nodes, 12, cfg.in_features))

    def loss(params):
        out = forward(xb, params, model.fixed, cfg, training=True, rng=np.random.default_rng(4))
        return _project(out, 3)

    err = _param_check(model, loss)
    results = [("model:gwnv2", err, THRESHOLDS["model"])]
    if log:
        log(f"model:gwnv2 {err:.2e} (<= {THRESHOLDS['model']:g})")
    return results


LEVELS = {"ops": check_ops, "layers": check_layers, "model": check_model}
