import pytest

from stwave.ablation import GRAPH_ROWS, HISTORY_LENGTHS, MODS_ROWS, ablate, mods_config, suite_arms
from stwave.config import MODIFICATIONS, RunConfig, gwnv2
from stwave.errors import ConfigError

TABLE2_LABELS = [
    "GWN baseline (no modifications)",
    "without n channels=40",
    "without skip connection",
    "without 0 replacement",
    "without grad clipping=3",
    "without lr decay",
    "with all modifications",
]


def test_mods_suite_has_the_seven_rows_in_order():
    arms = suite_arms(gwnv2(), "mods")
    assert [label for label, _ in arms] == TABLE2_LABELS


def test_each_reversion_flips_exactly_one_flag():
    base = gwnv2()
    for label, which in MODS_ROWS[1:-1]:
        flags = mods_config(base, which).modifications
        assert [f for f, on in flags.items() if not on] == [which]
    assert not any(mods_config(base, "none").modifications.values())
    assert mods_config(base, "all") == base


def test_graph_and_history_suites():
    arms = dict(suite_arms(gwnv2(), "graph"))
    assert [label for label, _ in GRAPH_ROWS] == list(arms)
    assert arms["without any graph convolution"]["model.supports_mode"] == "none"
    assert arms["without learned adjacency"]["model.supports_mode"] == "forward_backward"
    assert not any(arms["without learned adjacency"].modifications.values())
    hist = suite_arms(gwnv2(), "history")
    assert [cfg["data.history"] for _, cfg in hist] == list(HISTORY_LENGTHS)
    with pytest.raises(ConfigError):
        suite_arms(gwnv2(), "dropout")


def test_ablate_writes_tables(tmp_path):
    base = RunConfig({"data.synthetic_nodes": 4, "data.synthetic_days": 2, "model.nhid": 4,
                      "train.max_epochs": 1})
    labels = ["GWN baseline (no modifications)", "with all modifications"]
    table = ablate(base, "mods", 2, tmp_path, labels=labels)
    assert [r.label for r in table.rows] == labels
    assert all(len(r.val) == 2 for r in table.rows)
    text = (tmp_path / "mods" / "table.txt").read_text()
    assert text.splitlines()[0].startswith("Modification")
    csv = (tmp_path / "mods" / "table.csv").read_text().splitlines()
    assert csv[0] == "label,config_hash,seed,val_mean_mae,test_mean_mae" and len(csv) == 5
    assert (tmp_path / "mods" / "arm0" / "seed0" / "final_report").exists()
    with pytest.raises(ConfigError):
        ablate(base, "mods", 1, labels=["no such row"])
