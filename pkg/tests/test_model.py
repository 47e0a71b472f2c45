import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stwave import checkpoint
from stwave import tensor as T
from stwave.errors import CheckpointError, ConfigError
from stwave.graph import DiffusionParams, diffusion_conv
from stwave.model import (SUPPORT_MODES, GraphWaveNet, ModelConfig, _conv, _truncate_time, build_support_tensors,
                          layer_forward, load_model, param_count, param_count_table, param_shapes, receptive_field,
                          save_model)
from stwave.tensor import Tensor

PAPER_COUNTS = {32: 309_400, 40: 477_872}


def adjacency(n, seed=1):
    g = np.random.default_rng(seed)
    W = g.random((n, n))
    W[W < 0.5] = 0
    np.fill_diagonal(W, 1.0)
    return W


def small_model(mode="forward+backward+adaptive", n=5, seed=3, **kw):
    cfg = ModelConfig(n_nodes=n, nhid=kw.pop("nhid", 6), precision="float64", supports_mode=mode, **kw)
    return GraphWaveNet(cfg, adjacency(n), seed=seed)


@pytest.mark.parametrize("nhid", [32, 40])
def test_param_count_with_batch_norm_matches_reported_totals(nhid):
    cfg = ModelConfig(n_nodes=207, nhid=nhid, batch_norm=True)
    assert param_count(cfg) == PAPER_COUNTS[nhid]


@pytest.mark.parametrize("nhid", [32, 40])
def test_default_param_count_within_two_percent(nhid):
    cfg = ModelConfig(n_nodes=207, nhid=nhid)
    count = param_count(cfg)
    assert abs(count - PAPER_COUNTS[nhid]) / PAPER_COUNTS[nhid] <= 0.02
    # the whole residual is the per-layer normalization affine pair
    assert PAPER_COUNTS[nhid] - count == cfg.n_layers * 2 * nhid


@given(nhid=st.integers(1, 12), n=st.integers(2, 9), mode=st.sampled_from(sorted(SUPPORT_MODES)),
       bn=st.booleans(), order=st.integers(0, 3))
def test_param_count_equals_allocated_tensors(nhid, n, mode, bn, order):
    cfg = ModelConfig(n_nodes=n, nhid=nhid, supports_mode=mode, batch_norm=bn, diffusion_order=order)
    model = GraphWaveNet(cfg, adjacency(n))
    assert param_count(cfg) == model.n_params() == sum(param_count_table(cfg).values())
    assert list(model.params) == list(param_shapes(cfg))


def test_param_count_equals_checkpoint_elements(tmp_path):
    model = small_model()
    save_model(tmp_path / "m.ckpt", model)
    arrays, _, _ = checkpoint.load(tmp_path / "m.ckpt")
    assert sum(a.size for a in arrays.values()) == param_count(model.config)


def test_bypass_flag_changes_wiring_not_parameters():
    on = ModelConfig(n_nodes=5, gcn_bypass_skip=True)
    off = ModelConfig(n_nodes=5, gcn_bypass_skip=False)
    assert param_shapes(on) == param_shapes(off)
    m_on, m_off = GraphWaveNet(on, adjacency(5)), GraphWaveNet(off, adjacency(5))
    x = np.random.default_rng(0).standard_normal((2, 5, 12, 2))
    assert not np.array_equal(m_on.predict(x), m_off.predict(x))


def test_receptive_field_of_default_stack():
    assert receptive_field(ModelConfig(n_nodes=2)) == 13


def reference_forward(model, xb):
    """Unpruned forward: full-length skips and residuals at every layer."""
    cfg, params = model.config, model.params
    x = Tensor(np.ascontiguousarray(xb.transpose(0, 3, 1, 2), dtype=cfg.dtype))
    rf = receptive_field(cfg)
    if x.shape[3] < rf:
        x = T.pad(x, ((0, 0), (0, 0), (0, 0), (rf - x.shape[3], 0)))
    x = _conv(x, params, "start")
    supports = build_support_tensors(params, model.fixed, cfg)
    skip = None
    for i in range(cfg.n_layers):
        x, s = layer_forward(x, params, supports, cfg, i, buffers=model.buffers)
        skip = s if skip is None else T.add(s, _truncate_time(skip, s.shape[3]))
    h = _conv(T.relu(_conv(T.relu(skip), params, "end1")), params, "end2").data
    return h[..., -1].transpose(0, 2, 1)


@pytest.mark.parametrize("mode", sorted(SUPPORT_MODES))
@pytest.mark.parametrize("t_in", [5, 12, 20])
def test_forward_equals_unpruned_reference(mode, t_in):
    model = small_model(mode)
    x = np.random.default_rng(t_in).standard_normal((3, 5, t_in, 2))
    np.testing.assert_allclose(model.predict(x), reference_forward(model, x), rtol=0, atol=1e-12)


def test_batch_folding_is_sample_independent():
    model = small_model()
    x = np.random.default_rng(0).standard_normal((4, 5, 12, 2))
    whole = model.predict(x)
    for i in range(4):
        np.testing.assert_allclose(whole[i:i + 1], model.predict(x[i:i + 1]), rtol=0, atol=1e-12)


def test_perturbing_steps_outside_receptive_field_changes_nothing():
    model = small_model()
    rf = receptive_field(model.config)
    x = np.random.default_rng(0).standard_normal((2, 5, rf + 6, 2))
    y = x.copy()
    y[:, :, :6] += np.random.default_rng(1).standard_normal(y[:, :, :6].shape) * 100
    assert np.array_equal(model.predict(x), model.predict(y))


def test_short_history_equals_explicit_zero_padding():
    model = small_model()
    rf = receptive_field(model.config)
    x = np.random.default_rng(0).standard_normal((2, 5, 4, 2))
    padded = np.concatenate([np.zeros((2, 5, rf - 4, 2)), x], axis=2)
    assert np.array_equal(model.predict(x), model.predict(padded))


def test_without_supports_nodes_are_independent():
    model = small_model("none")
    x = np.random.default_rng(0).standard_normal((2, 5, 12, 2))
    y = x.copy()
    y[:, 2] += 50.0
    a, b = model.predict(x), model.predict(y)
    changed = np.flatnonzero((a != b).any(axis=(0, 2)))
    assert changed.tolist() == [2]


def test_two_hop_radius_per_diffusion_on_path_graph():
    n = 7
    P = np.zeros((n, n))
    for i in range(n - 1):
        P[i, i + 1] = P[i + 1, i] = 0.5
    g = np.random.default_rng(0)
    params = DiffusionParams(Tensor(g.standard_normal((2, 2))),
                             {(0, p): Tensor(g.standard_normal((2, 2))) for p in (1, 2)}, 2)
    x = g.standard_normal((1, 2, n, 3))
    y = x.copy()
    y[:, :, 3] += 10.0
    a = diffusion_conv(Tensor(x), [Tensor(P)], params).data
    b = diffusion_conv(Tensor(y), [Tensor(P)], params).data
    changed = np.flatnonzero((a != b).any(axis=(0, 1, 3)))
    assert changed.tolist() == [1, 2, 3, 4, 5]


def test_dropout_is_seeded_and_off_in_eval():
    model = small_model()
    x = np.random.default_rng(0).standard_normal((2, 5, 12, 2))
    r1 = model(x, training=True, rng=np.random.default_rng(5)).data
    r2 = model(x, training=True, rng=np.random.default_rng(5)).data
    assert np.array_equal(r1, r2)
    assert not np.array_equal(r1, model.predict(x))
    assert np.array_equal(model(x, training=False).data, model.predict(x))


def test_same_seed_same_parameters_regardless_of_config_order():
    a = GraphWaveNet(ModelConfig(n_nodes=4, nhid=4), adjacency(4), seed=9)
    b = GraphWaveNet(ModelConfig(n_nodes=4, nhid=4, batch_norm=True), adjacency(4), seed=9)
    for name, p in a.params.items():
        assert np.array_equal(p.data, b.params[name].data)


def test_model_checkpoint_roundtrip_is_bit_exact(tmp_path):
    model = small_model(batch_norm=True)
    save_model(tmp_path / "m.ckpt", model, {"epoch": 3})
    loaded, meta = load_model(tmp_path / "m.ckpt", model.adjacency)
    assert meta["epoch"] == 3 and loaded.config == model.config
    for name, p in model.params.items():
        assert np.array_equal(p.data, loaded.params[name].data)
    x = np.random.default_rng(0).standard_normal((2, 5, 12, 2))
    assert np.array_equal(model.predict(x), loaded.predict(x))


def test_checkpoint_config_mismatch_lists_shapes():
    model = small_model()
    other = ModelConfig(n_nodes=5, nhid=7, precision="float64")
    with pytest.raises(CheckpointError, match=r"stored \(6,\) vs expected \(7,\)"):
        GraphWaveNet(other, adjacency(5), params={}).load_arrays(model.state_arrays())


def test_config_validation():
    with pytest.raises(ConfigError, match="dilations"):
        ModelConfig(n_nodes=3, dilations=(1,))
    with pytest.raises(ConfigError, match="adjacency"):
        GraphWaveNet(ModelConfig(n_nodes=3), None)
    with pytest.raises(ConfigError, match="nodes"):
        small_model().predict(np.zeros((1, 4, 12, 2)))


def test_parameter_count_doc_matches_enumeration():
    import re
    from pathlib import Path

    doc = (Path(__file__).resolve().parents[1] / "docs" / "parameter_counts.md").read_text()
    t32 = param_count_table(ModelConfig(n_nodes=207, nhid=32, batch_norm=True))
    t40 = param_count_table(ModelConfig(n_nodes=207, nhid=40, batch_norm=True))
    rows = re.findall(r"^\| `([^`]+)` \| [^|]+ \| ([\d,]+) \| ([\d,]+) \|$", doc, flags=re.M)
    assert {name for name, _, _ in rows} == set(t32)
    for name, a, b in rows:
        assert (int(a.replace(",", "")), int(b.replace(",", ""))) == (t32[name], t40[name])
