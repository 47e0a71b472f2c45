"""Graph WaveNet with the optional GCN-bypass connection.

Activations use the (batch, channel, node, time) layout throughout.  One
layer runs a gated dilated temporal convolution, then a diffusion graph
convolution over the fixed and learned supports.  Each layer feeds a 1x1
skip projection into a running skip sum.  After the last layer the sum
goes through a two-convolution output head that emits every horizon at
once.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from stwave import checkpoint, rng as rngmod
from stwave import tensor as T
from stwave.errors import CheckpointError, ConfigError, ShapeError
from stwave.graph import DiffusionParams, adaptive_adjacency, diffusion_conv, transition_matrices
from stwave.tensor import Tensor

SUPPORT_MODES = {
    # mode: (uses fixed forward/backward supports, uses adaptive support)
    "forward+backward+adaptive": (True, True),
    "forward_backward": (True, False),
    "adaptive_only": (False, True),
    "none": (False, False),
}


@dataclass
class ModelConfig:
    n_nodes: int
    in_features: int = 2
    horizons: int = 12
    history: int = 12
    n_blocks: int = 4
    layers_per_block: int = 2
    kernel_size: int = 2
    dilations: tuple = (1, 2)
    nhid: int = 32
    skip_channels: int | None = None
    end_channels: int | None = None
    diffusion_order: int = 2
    supports_mode: str = "forward+backward+adaptive"
    embed_dim: int = 10
    gcn_bypass_skip: bool = False
    dropout: float = 0.3
    batch_norm: bool = False
    precision: str = "float32"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.skip_channels is None:
            self.skip_channels = 8 * self.nhid
        if self.end_channels is None:
            self.end_channels = 16 * self.nhid
        self.validate()

    def validate(self):
        counts = dict(n_nodes=self.n_nodes, in_features=self.in_features, horizons=self.horizons,
                      history=self.history, n_blocks=self.n_blocks, layers_per_block=self.layers_per_block,
                      kernel_size=self.kernel_size, nhid=self.nhid, skip_channels=self.skip_channels,
                      end_channels=self.end_channels, embed_dim=self.embed_dim)
        for key, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"model.{key} must be positive, got {value}")
        if len(self.dilations) != self.layers_per_block or min(self.dilations) < 1:
            raise ConfigError(f"model.dilations {self.dilations} must list {self.layers_per_block} "
                              "positive dilations (one per layer in a block)")
        if self.supports_mode not in SUPPORT_MODES:
            raise ConfigError(f"model.supports_mode must be one of {sorted(SUPPORT_MODES)}")
        if self.diffusion_order < 0:
            raise ConfigError("model.diffusion_order must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("model.precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def layer_dilations(self) -> list[int]:
        return [d for _ in range(self.n_blocks) for d in self.dilations]

    @property
    def n_layers(self) -> int:
        return self.n_blocks * self.layers_per_block

    @property
    def n_supports(self) -> int:
        fixed, adaptive = SUPPORT_MODES[self.supports_mode]
        return 2 * fixed + adaptive

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field(config: ModelConfig) -> int:
    return 1 + sum((config.kernel_size - 1) * d for d in config.layer_dilations)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, in the canonical enumeration order."""
    c, K = config.nhid, config.kernel_size
    shapes = {"start.weight": (c, config.in_features, 1, 1), "start.bias": (c,)}
    if SUPPORT_MODES[config.supports_mode][1]:
        shapes["adaptive.src"] = (config.n_nodes, config.embed_dim)
        shapes["adaptive.dst"] = (config.n_nodes, config.embed_dim)
    S = config.n_supports
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "filter.weight"] = (c, c, 1, K)
        shapes[p + "filter.bias"] = (c,)
        shapes[p + "gate.weight"] = (c, c, 1, K)
        shapes[p + "gate.bias"] = (c,)
        shapes[p + "residual.weight"] = (c, c, 1, 1)
        shapes[p + "residual.bias"] = (c,)
        shapes[p + "skip.weight"] = (config.skip_channels, c, 1, 1)
        shapes[p + "skip.bias"] = (config.skip_channels,)
        if S:
            shapes[p + "gcn.theta0"] = (c, c)
            for s in range(S):
                for q in range(1, config.diffusion_order + 1):
                    shapes[p + f"gcn.theta.{s}.{q}"] = (c, c)
            shapes[p + "gcn.bias"] = (c,)
        if config.batch_norm:
            shapes[p + "bn.weight"] = (c,)
            shapes[p + "bn.bias"] = (c,)
    shapes["end1.weight"] = (config.end_channels, config.skip_channels, 1, 1)
    shapes["end1.bias"] = (config.end_channels,)
    shapes["end2.weight"] = (config.horizons, config.end_channels, 1, 1)
    shapes["end2.bias"] = (config.horizons,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def param_count_table(config: ModelConfig) -> dict[str, int]:
    """Parameter counts grouped by role (layer index collapsed)."""
    table: dict[str, int] = {}
    for name, shape in param_shapes(config).items():
        parts = name.split(".")
        if parts[0] == "layers":
            key = "layers.*." + ".".join(parts[2:])
            if parts[2] == "gcn" and parts[3] == "theta":
                key = "layers.*.gcn.theta.*"
        else:
            key = name
        table[key] = table.get(key, 0) + int(np.prod(shape))
    return table


def _fan_in(name: str, shape: tuple, config: ModelConfig, shapes: dict) -> int:
    prefix, _, leaf = name.rpartition(".")
    if ".gcn" in name:
        return (1 + config.n_supports * config.diffusion_order) * config.nhid
    weight = shapes.get(prefix + ".weight")
    if weight is None:
        return 1
    return int(np.prod(weight[1:]))


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Allocate parameters; each draws from its own named random stream.

    Convolution weights and biases are uniform in +-1/sqrt(fan_in); node
    embeddings are standard normal scaled by 1/sqrt(embed_dim);
    normalization scales start at 1 and shifts at 0.
    """
    shapes = param_shapes(config)
    dtype = config.dtype
    params = {}
    for name, shape in shapes.items():
        gen = rngmod.stream(seed, "param", name)
        if name.startswith("adaptive."):
            data = gen.standard_normal(shape) / np.sqrt(config.embed_dim)
        elif name.endswith("bn.weight"):
            data = np.ones(shape)
        elif name.endswith("bn.bias"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape, config, shapes))
            data = gen.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def init_buffers(config: ModelConfig) -> dict[str, np.ndarray]:
    buffers = {}
    if config.batch_norm:
        for i in range(config.n_layers):
            buffers[f"layers.{i}.bn.running_mean"] = np.zeros(config.nhid, dtype=config.dtype)
            buffers[f"layers.{i}.bn.running_var"] = np.ones(config.nhid, dtype=config.dtype)
    return buffers


def fixed_supports(W: np.ndarray | None, config: ModelConfig) -> list[np.ndarray]:
    """Distance-derived supports required by ``config.supports_mode``."""
    if not SUPPORT_MODES[config.supports_mode][0]:
        return []
    if W is None:
        raise ConfigError(f"supports_mode {config.supports_mode!r} needs an adjacency matrix")
    W = np.asarray(W)
    if W.shape != (config.n_nodes, config.n_nodes):
        raise ConfigError(f"adjacency is {W.shape[0]}x{W.shape[1]} but model.n_nodes = {config.n_nodes}")
    forward, backward = transition_matrices(W)
    return [forward.astype(config.dtype), backward.astype(config.dtype)]


def _conv(x: Tensor, params, name: str, dilation: int = 1) -> Tensor:
    return T.conv_time(x, params[name + ".weight"], params[name + ".bias"], dilation)


def _truncate_time(x: Tensor, length: int) -> Tensor:
    if x.shape[3] == length:
        return x
    return T.slice_axis(x, 3, x.shape[3] - length, None)


def gated_tcn(x: Tensor, params, prefix: str, dilation: int) -> Tensor:
    """tanh(filter conv) * sigmoid(gate conv), both dilated and causal in time."""
    return T.mul(T.tanh(_conv(x, params, prefix + "filter", dilation)),
                 T.sigmoid(_conv(x, params, prefix + "gate", dilation)))


def diffusion_params(params, prefix: str, config: ModelConfig) -> DiffusionParams:
    theta = {(s, q): params[f"{prefix}gcn.theta.{s}.{q}"]
             for s in range(config.n_supports) for q in range(1, config.diffusion_order + 1)}
    return DiffusionParams(params[prefix + "gcn.theta0"], theta, config.diffusion_order,
                           params[prefix + "gcn.bias"])


def layer_forward(x: Tensor, params, supports: list[Tensor], config: ModelConfig, index: int,
                  training: bool = False, rng: np.random.Generator | None = None,
                  buffers: dict | None = None, skip_len: int | None = None,
                  need_residual: bool = True) -> tuple[Tensor | None, Tensor]:
    """One layer. Returns (residual output, skip projection).

    ``skip_len`` restricts the skip projection to the newest positions, and
    ``need_residual=False`` skips the residual branch; both are exact when
    the caller discards the omitted values.
    """
    prefix = f"layers.{index}."
    r = gated_tcn(x, params, prefix, config.layer_dilations[index])
    r_skip = r if skip_len is None or skip_len >= r.shape[3] else _truncate_time(r, skip_len)
    skip = _conv(r_skip, params, prefix + "skip")
    if not need_residual:
        return None, skip
    if supports:
        g = diffusion_conv(r, supports, diffusion_params(params, prefix, config))
        g = T.dropout(g, config.dropout, rng, training)
        y = T.add(r, g) if config.gcn_bypass_skip else g
    else:
        y = _conv(r, params, prefix + "residual")
    y = T.add(y, _truncate_time(x, y.shape[3]))
    if config.batch_norm:
        if buffers is None:
            raise ConfigError("batch_norm needs the running-statistics buffers")
        y = T.batch_norm(y, params[prefix + "bn.weight"], params[prefix + "bn.bias"],
                         buffers[prefix + "bn.running_mean"], buffers[prefix + "bn.running_var"],
                         training)
    return y, skip


def build_support_tensors(params, fixed: list[np.ndarray], config: ModelConfig) -> list[Tensor]:
    supports = [Tensor(P) for P in fixed]
    if SUPPORT_MODES[config.supports_mode][1]:
        supports.append(adaptive_adjacency(params["adaptive.src"], params["adaptive.dst"]))
    return supports


def forward(batch_x, params, fixed: list[np.ndarray], config: ModelConfig, training: bool = False,
            rng: np.random.Generator | None = None, buffers: dict | None = None) -> Tensor:
    """Predict all horizons for a (B, N, T_in, F) batch; returns (B, N, horizons) in scaled units."""
    data = batch_x.data if isinstance(batch_x, Tensor) else np.asarray(batch_x)
    if data.ndim != 4:
        raise ShapeError(f"batch must be (B, N, T_in, F), got {data.shape}")
    B, N, t_in, F = data.shape
    if N != config.n_nodes:
        raise ConfigError(f"batch has {N} nodes but model.n_nodes = {config.n_nodes}")
    if F != config.in_features:
        raise ConfigError(f"batch has {F} features but model.in_features = {config.in_features}")
    # fold the batch into the node axis: (1, F, B*N, T).  Convolutions then
    # run as one large GEMM per tap; node mixing regroups per sample.
    x = Tensor(np.ascontiguousarray(data.transpose(3, 0, 1, 2), dtype=config.dtype).reshape(1, F, B * N, t_in))
    rf = receptive_field(config)
    if t_in < rf:
        x = T.pad(x, ((0, 0), (0, 0), (0, 0), (rf - t_in, 0)))
    x = _conv(x, params, "start")
    supports = build_support_tensors(params, fixed, config)
    skip = None
    # the head is 1x1 and only its newest position is read, so each skip
    # projection is needed at one position; the last residual is never used
    last = config.n_layers - 1
    for i in range(config.n_layers):
        x, s = layer_forward(x, params, supports, config, i, training, rng, buffers, skip_len=1,
                             need_residual=i < last or config.batch_norm)
        skip = s if skip is None else T.add(s, skip)
    h = T.relu(skip)
    h = T.relu(_conv(h, params, "end1"))
    h = _conv(h, params, "end2")                      # (1, horizons, B*N, 1)
    h = T.reshape(h, (config.horizons, B, N))
    return T.transpose(h, (1, 2, 0))


class GraphWaveNet:
    """Bundle of config, parameters, buffers and fixed supports."""

    def __init__(self, config: ModelConfig, adjacency: np.ndarray | None = None, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.adjacency = None if adjacency is None else np.asarray(adjacency, dtype=np.float64)
        self.fixed = fixed_supports(self.adjacency, config)
        self.params = params if params is not None else init_params(config, seed)
        self.buffers = init_buffers(config)

    def __call__(self, batch_x, training: bool = False, rng=None) -> Tensor:
        return forward(batch_x, self.params, self.fixed, self.config, training, rng, self.buffers)

    def predict(self, batch_x) -> np.ndarray:
        return forward(batch_x, self.params, self.fixed, self.config, buffers=self.buffers).data

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def copy(self) -> "GraphWaveNet":
        clone = GraphWaveNet.__new__(GraphWaveNet)
        clone.config = self.config
        clone.adjacency = self.adjacency
        clone.fixed = self.fixed
        clone.params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        clone.buffers = {n: b.copy() for n, b in self.buffers.items()}
        return clone

    def load_arrays(self, arrays: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None):
        check_params(self.config, arrays)
        self.params = {n: Tensor(np.array(arrays[n], dtype=self.config.dtype), requires_grad=True, name=n)
                       for n in param_shapes(self.config)}
        if buffers:
            self.buffers = {n: np.array(b) for n, b in buffers.items()}


def check_params(config: ModelConfig, arrays: dict[str, np.ndarray]):
    """Raise CheckpointError listing every name/shape disagreement."""
    expected = param_shapes(config)
    problems = []
    for name, shape in expected.items():
        if name not in arrays:
            problems.append(f"missing {name} {shape}")
        elif tuple(arrays[name].shape) != tuple(shape):
            problems.append(f"{name}: stored {tuple(arrays[name].shape)} vs expected {tuple(shape)}")
    for name in arrays:
        if name not in expected:
            problems.append(f"unexpected {name} {tuple(arrays[name].shape)}")
    if problems:
        raise CheckpointError("checkpoint does not match model config: " + "; ".join(problems))


def save_model(path, model: GraphWaveNet, meta: dict | None = None):
    record = dict(meta or {})
    record["kind"] = "stwave-model"
    record["model_config"] = model.config.to_dict()
    record["buffers"] = sorted(model.buffers)
    arrays = dict(model.state_arrays())
    arrays.update(model.buffers)
    if model.adjacency is not None:
        record["has_adjacency"] = True
    precision = model.config.dtype.itemsize
    checkpoint.save(path, arrays, record, precision)


def load_model(path, adjacency: np.ndarray | None = None) -> tuple[GraphWaveNet, dict]:
    arrays, meta, _ = checkpoint.load(path)
    if meta.get("kind") != "stwave-model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(meta["model_config"])
    buffer_names = set(meta.get("buffers", []))
    params = {n: a for n, a in arrays.items() if n not in buffer_names}
    buffers = {n: a for n, a in arrays.items() if n in buffer_names}
    model = GraphWaveNet(config, adjacency, params={})
    model.load_arrays(params, buffers)
    return model, meta
