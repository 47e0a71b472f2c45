"""Training loop, evaluation, short-horizon pretraining and the range ensemble."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stwave import rng as rngmod
from stwave.data import DatasetSplits, WindowedDataset
from stwave.errors import ConfigError, DivergenceError, NumericalFault
from stwave.metrics import MetricReport, masked_mae_loss
from stwave.model import GraphWaveNet, load_model, save_model
from stwave.optim import AdamState, adam_step, clip_global_norm
from stwave.tensor import Tape, backward

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    lr_decay: float = 0.97
    clip_norm: float = 3.0
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    horizons: int = 12
    # first trained horizon; 7 with horizons=12 trains on the long range only
    horizon_start: int = 1
    seed: int = 0
    # optional time-to-target stop: end once val MeanMAE <= this value
    target_val_mae: float | None = None

    def __post_init__(self):
        if not 1 <= self.horizons <= 12:
            raise ConfigError(f"train.horizons must lie in 1..12, got {self.horizons}")
        if not 1 <= self.horizon_start <= self.horizons:
            raise ConfigError(f"train.horizon_start must lie in 1..{self.horizons}, got {self.horizon_start}")
        for key in ("base_lr", "lr_decay", "clip_norm"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"train.{key} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        for key in ("batch_size", "max_epochs", "patience"):
            if getattr(self, key) < 1:
                raise ConfigError(f"train.{key} must be >= 1")

    @property
    def horizon_subset(self) -> range:
        return range(self.horizon_start, self.horizons + 1)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used throughout ``epoch`` (0-based)."""
        return self.base_lr * self.lr_decay ** epoch


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mean_mae: float
    max_grad_norm: float
    clipped_steps: int
    wall_time: float

    def metrics(self) -> dict:
        """Everything except wall time (the reproducible part)."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainState:
    epoch: int = 0
    current_lr: float = 0.0
    adam: AdamState = field(default_factory=AdamState)
    best_val_mean_mae: float = math.inf
    best_epoch: int = -1
    best_checkpoint_path: str | None = None
    best_params: dict[str, np.ndarray] | None = None
    best_buffers: dict[str, np.ndarray] | None = None
    initial_val_mean_mae: float = math.nan
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    reached_target: bool = False


def predict(model: GraphWaveNet, ds: WindowedDataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Deterministic predictions over a whole split, in raw speed units (float64)."""
    out = []
    for lo in range(0, len(ds), batch_size):
        X, _, _ = ds.batch(np.arange(lo, min(lo + batch_size, len(ds))))
        out.append(ds.scaler.inverse(model.predict(X).astype(np.float64)))
    return np.concatenate(out, axis=0)


def evaluate(model: GraphWaveNet, ds: WindowedDataset, batch_size: int = EVAL_BATCH) -> MetricReport:
    """Dropout off, inverse-scaled predictions, masked metrics per horizon."""
    _, Y, M = ds.batch()
    return MetricReport.compute(predict(model, ds, batch_size), Y, M)


def persistence_predictions(ds: WindowedDataset) -> np.ndarray:
    last = ds.last_observed()
    return np.repeat(last[..., None], ds.t_out, axis=-1)


def persistence_report(ds: WindowedDataset) -> MetricReport:
    """Repeat the most recent nonzero input reading for every horizon."""
    _, Y, M = ds.batch()
    return MetricReport.compute(persistence_predictions(ds), Y, M)


def _write_lines(path: Path, lines):
    with open(path, "a", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def train(model: GraphWaveNet, cfg: TrainConfig, data: DatasetSplits, run_dir=None, label: str = "train",
          callback=None, log=None) -> TrainState:
    """Fit ``model`` in place; on return it holds the best-validation parameters.

    Per epoch: seeded shuffle, masked-MAE loss on the configured horizons,
    global-norm clipping, Adam at ``base_lr * lr_decay**epoch``; then the
    validation MeanMAE over the same horizons.  Training stops after
    ``patience`` epochs without improvement, at ``max_epochs``, or (when
    ``target_val_mae`` is set) once the best validation MeanMAE reaches it.

    ``callback(event, **info)`` receives ``"start"`` (before any update, with
    ``params``) and ``"step"`` (with ``epoch``, ``batch``, ``pre_norm`` and the
    clipped ``grads``).
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    horizons = cfg.horizon_subset
    scaler = data.train.scaler
    state = TrainState(adam=AdamState(weight_decay=cfg.weight_decay))
    state.initial_val_mean_mae = evaluate(model, data.val).mean_mae_over(horizons)
    if callback:
        callback("start", params={n: p.data for n, p in model.params.items()})
    since_best = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        state.epoch, state.current_lr = epoch, lr
        order = rngmod.stream(cfg.seed, label, "shuffle", epoch).permutation(len(data.train))
        losses, weights, max_norm, clipped_steps = [], [], 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            X, Y, M = data.train.batch(order[lo:lo + cfg.batch_size])
            drop = rngmod.stream(cfg.seed, label, "dropout", epoch, b)
            try:
                with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    for param in model.params.values():
                        tape.watch(param)  # unused parameters get zero gradients, never stale ones
                    pred = model(X, training=True, rng=drop)
                    pred = pred * scaler.std + scaler.mean
                    loss = masked_mae_loss(pred, Y, M, horizons)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalFault("loss is not finite")
                if not loss.requires_grad:
                    continue  # no valid targets in this batch
                backward(loss, tape)
                grads = {n: p.grad for n, p in model.params.items()}
                clipped, norm = clip_global_norm(grads, cfg.clip_norm)
            except NumericalFault as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {b}: {exc}",
                                      epoch=epoch, batch=b) from exc
            if callback:
                callback("step", epoch=epoch, batch=b, pre_norm=norm, grads=clipped)
            clipped_steps += any(clipped[n] is not grads[n] for n in grads)
            max_norm = max(max_norm, norm)
            model.params, state.adam = adam_step(model.params, clipped, state.adam, lr)
            count = float(M[..., horizons.start - 1:horizons.stop - 1].sum())
            losses.append(value * count)
            weights.append(count)
        train_loss = sum(losses) / sum(weights) if weights else math.nan
        val = evaluate(model, data.val).mean_mae_over(horizons)
        record = EpochRecord(epoch, lr, train_loss, val, max_norm, int(clipped_steps), time.perf_counter() - t0)
        state.history.append(record)
        improved = val < state.best_val_mean_mae
        if improved:
            state.best_val_mean_mae, state.best_epoch = val, epoch
            state.best_params = {n: p.data.copy() for n, p in model.params.items()}
            state.best_buffers = {n: b.copy() for n, b in model.buffers.items()}
            since_best = 0
            if run_dir is not None:
                path = run_dir / "best.ckpt"
                save_model(path, model, {"epoch": epoch, "val_mean_mae": val, "horizons": cfg.horizons})
                state.best_checkpoint_path = str(path)
        else:
            since_best += 1
        if run_dir is not None:
            _write_lines(run_dir / "metrics.log", [json.dumps(dataclasses.asdict(record), sort_keys=True)])
        if log:
            log(f"[{label}] epoch {epoch:3d} lr {lr:.6g} loss {train_loss:.4f} val {val:.4f}"
                + (" *" if improved else ""))
        if callback:
            callback("epoch", record=record)
        if since_best >= cfg.patience:
            state.stopped_early = True
            break
        if cfg.target_val_mae is not None and state.best_val_mean_mae <= cfg.target_val_mae:
            state.reached_target = True
            break
    if state.best_params is not None:
        model.load_arrays(state.best_params, state.best_buffers)
    return state


def write_final_report(run_dir, model: GraphWaveNet, data: DatasetSplits, state: TrainState | None = None,
                       extra: dict | None = None) -> dict:
    """Evaluate val and test, write ``final_report`` (table) and ``final_report.csv``."""
    run_dir = Path(run_dir)
    reports = {name: evaluate(model, data.split(name)) for name in ("val", "test")}
    lines = []
    for name, rep in reports.items():
        lines.append(rep.format_table(f"[{name}]"))
        lines.append("")
    if state is not None:
        lines.append(f"best epoch {state.best_epoch}, best val MeanMAE (trained horizons) "
                     f"{state.best_val_mean_mae:.6f}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    (run_dir / "final_report").write_text("\n".join(lines) + "\n", encoding="utf-8")
    records = [r for name, rep in reports.items() for r in rep.records(name)]
    (run_dir / "final_report.csv").write_text("split,horizon,metric,value\n" + "\n".join(records) + "\n",
                                              encoding="utf-8")
    return reports


@dataclass
class FinetuneResult:
    short_model: GraphWaveNet
    long_model: GraphWaveNet
    pretrain: TrainState
    finetune: TrainState


def pretrain_finetune(model: GraphWaveNet, cfg: TrainConfig, data: DatasetSplits, short_horizons: int = 6,
                      run_dir=None, callback=None, log=None) -> FinetuneResult:
    """Train on horizons 1..short_horizons, then continue from those weights on all horizons.

    The output head always emits every horizon; phase 1 only masks the loss,
    so the phase-2 model starts from the phase-1 best parameters unchanged.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    phase1 = dataclasses.replace(cfg, horizons=short_horizons, horizon_start=1)
    state1 = train(model, phase1, data, run_dir and run_dir / "pretrain", "pretrain", callback, log)
    short_model = model.copy()
    long_model = model.copy()
    state2 = train(long_model, cfg, data, run_dir and run_dir / "finetune", "finetune", callback, log)
    return FinetuneResult(short_model, long_model, state1, state2)


@dataclass
class EnsembleSpec:
    short_model: str
    long_model: str
    split_horizon: int = 6


def range_ensemble(short_model: GraphWaveNet, long_model: GraphWaveNet, X, split_horizon: int = 6) -> np.ndarray:
    """Horizons 1..split from the short model, the rest from the long model; no blending."""
    if short_model.config.n_nodes != long_model.config.n_nodes:
        raise ConfigError(f"ensemble members disagree on node count: {short_model.config.n_nodes} "
                          f"vs {long_model.config.n_nodes}")
    H = long_model.config.horizons
    if not 1 <= split_horizon <= min(H, short_model.config.horizons):
        raise ConfigError(f"split horizon {split_horizon} outside both models' range")
    out = long_model.predict(X).copy()
    out[..., :split_horizon] = short_model.predict(X)[..., :split_horizon]
    return out


def ensemble_predictions(short_model, long_model, ds: WindowedDataset, split_horizon: int = 6) -> np.ndarray:
    out = []
    for lo in range(0, len(ds), EVAL_BATCH):
        X, _, _ = ds.batch(np.arange(lo, min(lo + EVAL_BATCH, len(ds))))
        out.append(ds.scaler.inverse(range_ensemble(short_model, long_model, X, split_horizon).astype(np.float64)))
    return np.concatenate(out, axis=0)


def evaluate_ensemble(short_model, long_model, ds: WindowedDataset, split_horizon: int = 6) -> MetricReport:
    _, Y, M = ds.batch()
    return MetricReport.compute(ensemble_predictions(short_model, long_model, ds, split_horizon), Y, M)


def load_ensemble(spec: EnsembleSpec, adjacency=None) -> tuple[GraphWaveNet, GraphWaveNet]:
    short, _ = load_model(spec.short_model, adjacency)
    long, _ = load_model(spec.long_model, adjacency)
    if short.config.n_nodes != long.config.n_nodes:
        raise ConfigError(f"ensemble members disagree on node count: {short.config.n_nodes} "
                          f"vs {long.config.n_nodes}")
    return short, long
