import json
import os
import subprocess
import sys

import numpy as np
import pytest

from stwave import cli
from stwave.config import DEFAULTS
from stwave.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main

TINY = ["--data.source=csv", "--speeds=data/speeds.csv", "--distances=data/distances.txt", "--nhid=4",
        "--max_epochs=1", "--batch_size=32"]


@pytest.fixture
def workdir(tmp_path):
    assert main(["--workdir", str(tmp_path), "generate", "--nodes", "4", "--days", "2", "--seed", "7",
                 "--out", "data"]) == EXIT_OK
    return tmp_path


def run(workdir, *argv):
    return main(["--workdir", str(workdir), *argv])


def test_generate_is_byte_identical(workdir):
    first = {p: (workdir / "data" / p).read_bytes() for p in ("speeds.csv", "distances.txt")}
    assert run(workdir, "generate", "--nodes", "4", "--days", "2", "--seed", "7", "--out", "data") == 0
    for name, blob in first.items():
        assert (workdir / "data" / name).read_bytes() == blob
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["exit_code"] == 0 and manifest["seed"] == 7


def test_generate_zero_rate_zero(tmp_path):
    assert main(["--workdir", str(tmp_path), "generate", "--nodes", "3", "--days", "1", "--zero-rate", "0"]) == 0
    rows = (tmp_path / "data" / "speeds.csv").read_text().splitlines()[1:]
    assert all(float(c) != 0.0 for row in rows for c in row.split(",")[1:])


def test_train_eval_and_manifest(workdir, capsys):
    assert run(workdir, "train", "--run-dir", "runs/a", *TINY) == EXIT_OK
    out = capsys.readouterr().out
    assert "MeanMAE" in out
    m = json.loads((workdir / "runs/a/manifest.json").read_text())
    assert m["command"] == "train" and m["status"] == "ok" and m["config"]["model.nhid"] == 4
    assert m["config_hash"] and m["version"] and m["started"] and m["finished"]
    assert set(m["config"]) == set(DEFAULTS)
    assert run(workdir, "eval", "--checkpoint", "runs/a/best.ckpt", "--dataset", "data", "--split", "val",
               "--run-dir", "runs/e", *TINY[3:4]) == EXIT_OK
    assert (workdir / "runs/e/report.csv").read_text().startswith("split,horizon,metric,value")


def test_missing_dataset_path_names_the_key(workdir, capsys):
    code = run(workdir, "train", "--data.source=csv", "--distances=data/distances.txt", "--nhid=4")
    assert code == EXIT_USAGE
    assert "data.speeds" in capsys.readouterr().err


def test_divergence_exits_2(workdir):
    assert run(workdir, "train", "--run-dir", "runs/d", *TINY, "--base_lr=1e30", "--clip_norm=1e30") == EXIT_NUMERICAL
    assert json.loads((workdir / "runs/d/manifest.json").read_text())["exit_code"] == EXIT_NUMERICAL


def test_usage_and_io_exit_codes(workdir, capsys):
    assert run(workdir, "train", "--lr_decy=1") == EXIT_USAGE
    assert "did you mean 'train.lr_decay'" in capsys.readouterr().err
    assert run(workdir, "train", "--bogus") == EXIT_USAGE
    assert run(workdir, "frobnicate") == EXIT_USAGE
    assert run(workdir, "eval", "--checkpoint", "missing.ckpt", "--dataset", "data") == EXIT_IO
    assert main(["--help"]) == EXIT_OK


def test_checkpoint_config_mismatch_exits_1(workdir, capsys):
    assert run(workdir, "train", "--run-dir", "runs/a", *TINY) == 0
    assert run(workdir, "generate", "--nodes", "5", "--days", "2", "--out", "other") == 0
    capsys.readouterr()
    assert run(workdir, "eval", "--checkpoint", "runs/a/best.ckpt", "--dataset", "other") == EXIT_USAGE
    assert "5x5" in capsys.readouterr().err


def test_ensemble_splices_the_short_model(workdir):
    assert run(workdir, "train", "--run-dir", "runs/s", *TINY, "--horizons=6") == 0
    assert run(workdir, "train", "--run-dir", "runs/l", *TINY, "--seed=1") == 0
    assert run(workdir, "ensemble", "--short", "runs/s/best.ckpt", "--long", "runs/l/best.ckpt",
               "--split-horizon", "6", "--dataset", "data", "--run-dir", "runs/ens") == 0
    rows = [line.split() for line in (workdir / "runs/ens/report.txt").read_text().splitlines()]
    table = {r[0]: r[1:] for r in rows[1:]}
    assert table["ensemble"][0] == table["short"][0]          # MAE@3, the 15-minute column
    assert table["ensemble"][2] == table["long"][2]           # MAE@12
    curve = (workdir / "runs/ens/horizon_mae.csv").read_text().splitlines()
    assert curve[0] == "horizon,minutes,short,long,ensemble" and len(curve) == 13


def test_ablate_mods_emits_seven_rows(workdir, capsys):
    assert run(workdir, "ablate", "--suite", "mods", "--seeds", "1", "--quiet", "--run-dir", "runs/ab",
               *TINY) == 0
    lines = (workdir / "runs/ab/mods/table.txt").read_text().splitlines()
    assert len(lines) == 8
    assert lines[-1].startswith("with all modifications")


def test_gradcheck_model_passes_and_failures_exit_nonzero(tmp_path, monkeypatch, capsys):
    assert main(["--workdir", str(tmp_path), "gradcheck", "--level", "model"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out
    from stwave import gradcheck
    monkeypatch.setitem(gradcheck.LEVELS, "ops", lambda: [("broken", 1.0, 1e-5)])
    assert main(["--workdir", str(tmp_path), "gradcheck", "--level", "ops"]) == EXIT_NUMERICAL


def test_replay_reproduces_metrics_bit_exactly(workdir):
    assert run(workdir, "train", "--run-dir", "runs/r", *TINY) == 0
    assert run(workdir, "replay", "--manifest", "runs/r/manifest.json") == 0
    a = (workdir / "runs/r/final_report.csv").read_text()
    b = (workdir / "runs/r/replay/final_report.csv").read_text()
    assert a == b
    m = json.loads((workdir / "runs/r/replay/manifest.json").read_text())
    assert m["config_hash"] == json.loads((workdir / "runs/r/manifest.json").read_text())["config_hash"]


def test_module_entry_point_in_single_thread_mode(workdir):
    env = dict(os.environ, STWAVE_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "stwave", "--workdir", str(workdir), "gradcheck"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    m = json.loads((workdir / "runs/gradcheck-ops/manifest.json").read_text())
    assert m["threads"] == "1"


def test_flag_reference_is_current():
    from pathlib import Path

    doc = Path(__file__).resolve().parents[1] / "docs" / "cli.md"
    assert doc.read_text() == cli.flag_reference()
