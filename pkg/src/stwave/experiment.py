"""Build datasets, models and training configs from a RunConfig."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stwave.config import RunConfig
from stwave.data import DatasetSplits, SpeedSeries, generate_synthetic, load_speed_csv, prepare_dataset
from stwave.errors import ConfigError
from stwave.graph import SensorGraph, build_adjacency, read_distance_matrix
from stwave.model import GraphWaveNet, ModelConfig
from stwave.train import TrainConfig, evaluate, pretrain_finetune, train, write_final_report


@dataclass
class Problem:
    graph: SensorGraph
    series: SpeedSeries
    adjacency: np.ndarray
    data: DatasetSplits

    @property
    def n_nodes(self) -> int:
        return self.series.n_nodes


def _resolve(path: str, key: str, workdir) -> Path:
    if not path:
        raise ConfigError(f"{key} is not set (required when data.source=csv)")
    p = Path(path)
    if not p.is_absolute():
        p = Path(workdir) / p
    if not p.exists():
        raise ConfigError(f"{key}: file not found: {p}")
    return p


def load_problem(run: RunConfig, workdir=".") -> Problem:
    """Series, graph and windowed splits described by the ``data`` and ``adjacency`` keys."""
    if run["data.source"] == "synthetic":
        graph, series = generate_synthetic(run["data.synthetic_nodes"], run["data.synthetic_days"],
                                           run["data.synthetic_seed"], run["data.zero_rate"])
        graph = SensorGraph(graph.distances, run["adjacency.threshold_k"])
    else:
        series = load_speed_csv(_resolve(run["data.speeds"], "data.speeds", workdir))
        D = read_distance_matrix(_resolve(run["data.distances"], "data.distances", workdir))
        if D.shape[0] != series.n_nodes:
            raise ConfigError(f"distance matrix has {D.shape[0]} nodes but the speed file has {series.n_nodes}")
        graph = SensorGraph(D, run["adjacency.threshold_k"])
    W = build_adjacency(graph, run["adjacency.exponent"], run["adjacency.threshold_mode"])
    data = prepare_dataset(series, run["data.t_in"], run["data.t_out"], run["data.zero_replacement"],
                           dtype=np.dtype(run["model.precision"]))
    if run["data.history"] != run["data.t_in"]:
        data = data.with_history(run["data.history"])
    return Problem(graph, series, W, data)


def model_config(run: RunConfig, n_nodes: int) -> ModelConfig:
    m = run.section("model")
    return ModelConfig(n_nodes=n_nodes, in_features=2, horizons=run["data.t_out"], history=run["data.history"],
                       **m)


def train_config(run: RunConfig, **changes) -> TrainConfig:
    t = run.section("train")
    t.pop("mode")
    t.pop("pretrain_horizons")
    t.update(changes)
    t["horizons"] = min(t["horizons"], run["data.t_out"])
    return TrainConfig(**t)


def build_model(run: RunConfig, problem: Problem) -> GraphWaveNet:
    cfg = model_config(run, problem.n_nodes)
    return GraphWaveNet(cfg, problem.adjacency, seed=run["train.seed"])


@dataclass
class RunResult:
    model: GraphWaveNet
    state: object
    val: object
    test: object
    short_model: GraphWaveNet | None = None


def run_training(run: RunConfig, problem: Problem, run_dir=None, log=None, callback=None) -> RunResult:
    """Train per ``train.mode``; with ``run_dir`` write the standard run artifacts."""
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot").write_text(run.to_text(), encoding="utf-8")
    model = build_model(run, problem)
    cfg = train_config(run)
    short = None
    if run["train.mode"] == "pretrain_finetune":
        res = pretrain_finetune(model, cfg, problem.data, run["train.pretrain_horizons"], run_dir, callback, log)
        model, short, state = res.long_model, res.short_model, res.finetune
    else:
        state = train(model, cfg, problem.data, run_dir, callback=callback, log=log)
    if run_dir is not None:
        write_final_report(run_dir, model, problem.data, state,
                           {"config_hash": run.hash(), "seed": run["train.seed"]})
    return RunResult(model, state, evaluate(model, problem.data.val), evaluate(model, problem.data.test), short)
