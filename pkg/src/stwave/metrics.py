"""Masked forecasting metrics.

A target entry counts only where its raw reading is nonzero (a zero means
no vehicles passed, not a standstill).  Per-horizon errors are normalized
by the number of valid entries at that horizon.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from stwave import tensor as T
from stwave.errors import ShapeError
from stwave.tensor import Tensor

# reporting horizons (15, 30, 60 minutes)
TABLE_HORIZONS = (3, 6, 12)


def _check(pred, Y, M):
    pred, Y, M = (np.asarray(a, dtype=np.float64) for a in (pred, Y, M))
    if not pred.shape == Y.shape == M.shape:
        raise ShapeError(f"pred {pred.shape}, target {Y.shape} and mask {M.shape} must agree")
    if pred.ndim != 3:
        raise ShapeError(f"expected (B, N, T_out) arrays, got {pred.shape}")
    return pred, Y, M


def _per_horizon(values, M, what):
    counts = M.sum(axis=(0, 1))
    total = (values * M).sum(axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, total / np.where(counts > 0, counts, 1), np.nan)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        warnings.warn(f"{what}: horizons {[int(h) + 1 for h in empty]} have no valid entries", RuntimeWarning,
                      stacklevel=3)
    return out, counts.astype(np.int64)


def masked_mae(pred, Y, M) -> np.ndarray:
    pred, Y, M = _check(pred, Y, M)
    return _per_horizon(np.abs(pred - Y), M, "MAE")[0]


def masked_rmse(pred, Y, M) -> np.ndarray:
    pred, Y, M = _check(pred, Y, M)
    return np.sqrt(_per_horizon(np.square(pred - Y), M, "RMSE")[0])


def masked_mape(pred, Y, M) -> np.ndarray:
    pred, Y, M = _check(pred, Y, M)
    valid = M * (Y != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(valid > 0, np.abs(pred - Y) / np.where(Y != 0, np.abs(Y), 1.0), 0.0)
    return _per_horizon(ratio, valid, "MAPE")[0]


def mean_over(per_horizon: np.ndarray, horizons=None) -> float:
    """Mean of the defined entries, optionally restricted to 1-based ``horizons``."""
    vals = np.asarray(per_horizon, dtype=np.float64)
    if horizons is not None:
        vals = vals[np.asarray(list(horizons)) - 1]
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if vals.size else float("nan")


@dataclass
class MetricReport:
    mae: np.ndarray
    rmse: np.ndarray
    mape: np.ndarray
    counts: np.ndarray
    mean_mae: float = field(init=False)

    def __post_init__(self):
        self.mean_mae = mean_over(self.mae)

    @classmethod
    def compute(cls, pred, Y, M) -> "MetricReport":
        pred, Y, M = _check(pred, Y, M)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rmse, mape = masked_rmse(pred, Y, M), masked_mape(pred, Y, M)
        mae, counts = _per_horizon(np.abs(pred - Y), M, "MAE")
        return cls(mae, rmse, mape, counts)

    @property
    def horizons(self) -> int:
        return len(self.mae)

    def mean_mae_over(self, horizons) -> float:
        return mean_over(self.mae, horizons)

    def table_row(self) -> dict[str, float]:
        row = {f"MAE@{h}": float(self.mae[h - 1]) for h in TABLE_HORIZONS if h <= self.horizons}
        row["MeanMAE"] = self.mean_mae
        return row

    def records(self, split: str) -> list[str]:
        """Line-delimited ``split,horizon,metric,value`` records."""
        lines = []
        for h in range(self.horizons):
            for name, arr in (("mae", self.mae), ("rmse", self.rmse), ("mape", self.mape)):
                lines.append(f"{split},{h + 1},{name},{float(arr[h])!r}")
            lines.append(f"{split},{h + 1},count,{int(self.counts[h])}")
        lines.append(f"{split},all,mean_mae,{self.mean_mae!r}")
        return lines

    def format_table(self, title: str = "") -> str:
        head = f"{'horizon':>8} {'minutes':>8} {'MAE':>9} {'RMSE':>9} {'MAPE%':>8} {'valid':>8}"
        lines = [title] if title else []
        lines.append(head)
        for h in range(self.horizons):
            lines.append(f"{h + 1:>8d} {5 * (h + 1):>8d} {self.mae[h]:>9.4f} {self.rmse[h]:>9.4f} "
                         f"{100 * self.mape[h]:>8.3f} {int(self.counts[h]):>8d}")
        lines.append(f"MeanMAE {self.mean_mae:.4f}")
        return "\n".join(lines)


def masked_mae_loss(pred: Tensor, Y: np.ndarray, M: np.ndarray, horizons=None) -> Tensor:
    """Differentiable masked mean |pred - Y| over the selected 1-based horizons.

    ``horizons`` is a contiguous range such as ``range(1, 7)``; entries of
    other horizons and masked entries carry zero weight, so perturbing them
    leaves the loss and every gradient unchanged.
    """
    if pred.shape != tuple(np.shape(Y)) or pred.shape != tuple(np.shape(M)):
        raise ShapeError(f"pred {pred.shape}, target {np.shape(Y)}, mask {np.shape(M)} must agree")
    weight = np.array(M, dtype=pred.dtype, copy=True)
    if horizons is not None:
        keep = np.zeros(pred.shape[-1], dtype=bool)
        keep[np.asarray(list(horizons)) - 1] = True
        weight[..., ~keep] = 0
    count = weight.sum()
    if count == 0:
        return T.constant((), 0.0, dtype=pred.dtype)
    target = np.where(weight > 0, Y, 0).astype(pred.dtype)
    diff = T.abs_(T.sub(pred, Tensor(target)))
    return T.div(T.sum_(T.mul(diff, Tensor(weight))), pred.dtype.type(count))
