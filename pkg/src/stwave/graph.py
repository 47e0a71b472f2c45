"""Road-network supports and the diffusion graph convolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stwave import tensor as T
from stwave.errors import DegenerateGraphError, ParseError, ShapeError
from stwave.tensor import Tensor

EXPONENT_MODES = ("squared_ratio", "ratio_squared_sigma")
THRESHOLD_MODES = ("subtract", "cutoff")


@dataclass
class SensorGraph:
    """Pairwise on-road distances between sensors, in meters.

    ``inf`` marks unreachable pairs.  The kernel width ``sigma`` is the
    population standard deviation of the finite off-diagonal distances.
    """

    distances: np.ndarray
    threshold_k: float = 0.1
    sigma: float = field(init=False)

    def __post_init__(self):
        D = np.array(self.distances, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] < 1:
            raise ShapeError(f"distance matrix must be square, got {D.shape}")
        if np.isnan(D).any() or (D < 0).any() or np.isneginf(D).any():
            raise DegenerateGraphError("distances must be non-negative (inf allowed for unreachable)")
        if (np.diag(D) != 0).any():
            i = int(np.flatnonzero(np.diag(D) != 0)[0])
            raise DegenerateGraphError(f"diagonal distance D[{i},{i}] must be 0")
        if not 0 <= self.threshold_k < 1:
            raise DegenerateGraphError(f"threshold k must lie in [0, 1), got {self.threshold_k}")
        self.distances = D
        off = D[~np.eye(len(D), dtype=bool)]
        off = off[np.isfinite(off)]
        self.sigma = float(off.std()) if off.size else 0.0

    @property
    def n_nodes(self) -> int:
        return self.distances.shape[0]


def build_adjacency(graph: SensorGraph, exponent: str = "squared_ratio",
                    threshold_mode: str = "subtract") -> np.ndarray:
    """Thresholded Gaussian kernel weights W (n x n).

    ``squared_ratio`` reads the kernel as exp(-(D/sigma)^2); the alternative
    ``ratio_squared_sigma`` is exp(-D/sigma^2).  ``subtract`` yields
    max(kernel - k, 0); ``cutoff`` keeps the raw kernel where it is >= k.
    """
    if exponent not in EXPONENT_MODES:
        raise ValueError(f"exponent must be one of {EXPONENT_MODES}")
    if threshold_mode not in THRESHOLD_MODES:
        raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
    sigma = graph.sigma
    if not sigma > 0:
        raise DegenerateGraphError("all finite pairwise distances are identical (sigma = 0)")
    D = graph.distances
    with np.errstate(over="ignore"):
        if exponent == "squared_ratio":
            kernel = np.exp(-np.square(D / sigma))
        else:
            kernel = np.exp(-D / sigma ** 2)
    k = graph.threshold_k
    if threshold_mode == "subtract":
        return np.maximum(kernel - k, 0.0)
    return np.where(kernel >= k, kernel, 0.0)


def _row_normalize(W: np.ndarray, what: str) -> np.ndarray:
    rows = W.sum(axis=1)
    bad = np.flatnonzero(rows <= 0)
    if bad.size:
        raise DegenerateGraphError(f"{what}: node {int(bad[0])} has zero total weight")
    return W / rows[:, None]


def transition_matrices(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward (downstream) and backward (upstream) random-walk matrices."""
    W = np.asarray(W, dtype=np.float64)
    return _row_normalize(W, "forward transition"), _row_normalize(W.T, "backward transition")


def adaptive_adjacency(src: Tensor, dst: Tensor) -> Tensor:
    """Row-softmax of relu(src @ dst^T) for (n, d) node embeddings."""
    if src.shape != dst.shape or src.ndim != 2:
        raise ShapeError(f"embeddings must both be (n, d), got {src.shape} and {dst.shape}")
    return T.softmax(T.relu(T.matmul(src, T.transpose(dst))), axis=1)


@dataclass
class DiffusionParams:
    """Channel maps for one diffusion convolution.

    ``theta0`` mixes the untouched input; ``theta[(s, p)]`` mixes the input
    after ``p`` applications of support ``s`` (p = 1..order).  All maps are
    (C_out, C_in).
    """

    theta0: Tensor
    theta: dict[tuple[int, int], Tensor]
    order: int
    bias: Tensor | None = None

    @property
    def n_supports(self) -> int:
        return len({s for s, _ in self.theta})


def diffusion_conv(x: Tensor, supports: list[Tensor], params: DiffusionParams, order: int | None = None) -> Tensor:
    """Theta0 x + sum over supports s and powers p of Theta_{s,p} (P_s^p x).

    Powers are applied iteratively along the node axis; dense powers are
    never formed.  ``x`` is (B, C_in, N, T), or (B, C_in, G*N, T) for G
    independent graphs stacked along the node axis.
    """
    order = params.order if order is None else order
    m = x.shape[2]
    n = supports[0].shape[0] if supports else m
    for s, P in enumerate(supports):
        if P.shape != (n, n) or m % n:
            raise ShapeError(f"support {s} has shape {P.shape}, incompatible with {m} nodes")
    features = [x]
    weights = [params.theta0]
    grouped = (x.shape[0] * x.shape[1], m // n, n, x.shape[3])
    for s, P in enumerate(supports):
        h = x
        for p in range(1, order + 1):
            if m == n:
                h = T.node_mix(P, h)
            else:
                h = T.reshape(T.node_mix(P, T.reshape(h, grouped)), x.shape)
            features.append(h)
            weights.append(params.theta[(s, p)])
    stacked = T.concat(features, axis=1) if len(features) > 1 else x
    W = T.concat(weights, axis=1) if len(weights) > 1 else weights[0]
    W = T.reshape(W, (W.shape[0], W.shape[1], 1, 1))
    return T.conv_time(stacked, W, params.bias, dilation=1)


def read_distance_matrix(path) -> np.ndarray:
    """Parse the text format: a line with n, then n rows of n distances."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read distance matrix: {exc}", path) from exc
    body = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise ParseError("empty distance matrix file", path)
    first_line, header = body[0]
    try:
        n = int(header.strip())
    except ValueError:
        raise ParseError(f"header must be the node count, got {header.strip()!r}", path, first_line) from None
    rows = body[1:]
    if len(rows) != n:
        raise ParseError(f"expected {n} matrix rows, found {len(rows)}", path)
    D = np.empty((n, n), dtype=np.float64)
    for r, (lineno, text) in enumerate(rows):
        cells = text.split()
        if len(cells) != n:
            raise ParseError(f"expected {n} values, found {len(cells)}", path, lineno)
        try:
            D[r] = [float(c) for c in cells]
        except ValueError as exc:
            raise ParseError(f"non-numeric distance ({exc})", path, lineno) from None
    return D


def write_distance_matrix(path, D: np.ndarray):
    D = np.asarray(D, dtype=np.float64)
    lines = [str(D.shape[0])]
    lines += [" ".join(repr(float(v)) for v in row) for row in D]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
