"""Ablation harness: modification reversions, graph variants and history lengths."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stwave.config import MODIFICATIONS, RunConfig
from stwave.errors import ConfigError
from stwave.experiment import load_problem, run_training

MODS_ROWS = (
    ("GWN baseline (no modifications)", "none"),
    ("without n channels=40", "wide_filters"),
    ("without skip connection", "gcn_bypass_skip"),
    ("without 0 replacement", "zero_replacement"),
    ("without grad clipping=3", "clip3"),
    ("without lr decay", "lr_decay_on"),
    ("with all modifications", "all"),
)

GRAPH_ROWS = (
    ("GWN baseline (no modifications)", "forward+backward+adaptive"),
    ("without any graph convolution", "none"),
    ("without learned adjacency", "forward_backward"),
    ("learned adjacency only", "adaptive_only"),
)

HISTORY_LENGTHS = (1, 2, 3, 4, 5, 6, 9, 12)


def mods_config(base: RunConfig, which: str) -> RunConfig:
    """``none`` = all off, ``all`` = all on, a flag name = all on except that flag."""
    if which == "none":
        return base.with_modifications(**{f: False for f in MODIFICATIONS})
    if which == "all":
        return base.with_modifications(**{f: True for f in MODIFICATIONS})
    if which not in MODIFICATIONS:
        raise ConfigError(f"unknown modification {which!r}")
    flags = {f: f != which for f in MODIFICATIONS}
    return base.with_modifications(**flags)


def suite_arms(base: RunConfig, suite: str) -> list[tuple[str, RunConfig]]:
    if suite == "mods":
        return [(label, mods_config(base, which)) for label, which in MODS_ROWS]
    if suite == "graph":
        plain = mods_config(base, "none")
        return [(label, plain.replace(model__supports_mode=mode)) for label, mode in GRAPH_ROWS]
    if suite == "history":
        return [(f"history length {n}", base.replace(data__history=n)) for n in HISTORY_LENGTHS
                if n <= base["data.t_in"]]
    raise ConfigError(f"unknown ablation suite {suite!r}; expected mods, graph or history")


@dataclass
class AblationRow:
    label: str
    config_hash: str
    val: list[float] = field(default_factory=list)
    test: list[float] = field(default_factory=list)

    @property
    def val_mean(self) -> float:
        return float(np.mean(self.val))

    @property
    def test_mean(self) -> float:
        return float(np.mean(self.test))


@dataclass
class AblationTable:
    suite: str
    seeds: list[int]
    rows: list[AblationRow]

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def format(self) -> str:
        width = max(len(r.label) for r in self.rows)
        head = f"{'Modification' if self.suite == 'mods' else 'Variant':<{width}}  {'Mean MAE (test)':>15}  " \
               f"{'val':>8}  seeds"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.label:<{width}}  {r.test_mean:>15.4f}  {r.val_mean:>8.4f}  {len(r.val)}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["label,config_hash,seed,val_mean_mae,test_mean_mae"]
        for r in self.rows:
            for s, v, t in zip(self.seeds, r.val, r.test):
                lines.append(f'"{r.label}",{r.config_hash},{s},{v!r},{t!r}')
        return "\n".join(lines) + "\n"


def ablate(base: RunConfig, suite: str = "mods", n_seeds: int = 3, run_dir=None, workdir=".", log=None,
           labels=None) -> AblationTable:
    """Train every arm of ``suite`` for ``n_seeds`` seeds (base seed, base seed + 1, ...).

    ``labels`` restricts the run to a subset of rows (the table keeps the
    suite's row order).
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    run_dir = Path(run_dir) if run_dir is not None else None
    seeds = [base["train.seed"] + i for i in range(n_seeds)]
    arms = suite_arms(base, suite)
    if labels is not None:
        missing = set(labels) - {label for label, _ in arms}
        if missing:
            raise ConfigError(f"unknown rows for suite {suite}: {sorted(missing)}")
        arms = [(label, cfg) for label, cfg in arms if label in labels]
    problems = {}
    rows = []
    for index, (label, arm) in enumerate(arms):
        row = AblationRow(label, arm.hash())
        data_key = (tuple(sorted(arm.section("data").items())) + tuple(sorted(arm.section("adjacency").items()))
                    + (arm["model.precision"],))
        if data_key not in problems:
            problems[data_key] = load_problem(arm, workdir)
        problem = problems[data_key]
        for seed in seeds:
            cfg = arm.replace(train__seed=seed)
            where = run_dir / suite / f"arm{index}" / f"seed{seed}" if run_dir is not None else None
            result = run_training(cfg, problem, where)
            row.val.append(result.val.mean_mae)
            row.test.append(result.test.mean_mae)
            if log:
                log(f"[{suite}] {label} seed {seed}: val {result.val.mean_mae:.4f} test {result.test.mean_mae:.4f}")
        rows.append(row)
    table = AblationTable(suite, seeds, rows)
    if run_dir is not None:
        out = run_dir / suite
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table.format() + "\n", encoding="utf-8")
        (out / "table.csv").write_text(table.csv(), encoding="utf-8")
    return table
