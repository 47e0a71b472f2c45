import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stwave import checkpoint, rng
from stwave.errors import CheckpointError


@given(arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=True)))
def test_roundtrip_bit_exact(a):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.ckpt"
        checkpoint.save(path, {"a": a, "scalar": np.float64(2.5)}, {"k": [1, 2]})
        back, meta, precision = checkpoint.load(path)
    assert precision == 8 and meta == {"k": [1, 2]}
    assert back["a"].tobytes() == a.tobytes() and back["a"].shape == a.shape
    assert back["scalar"].shape == () and back["scalar"] == 2.5


def test_float32_precision_tag(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    checkpoint.save(tmp_path / "x", {"a": a})
    back, _, precision = checkpoint.load(tmp_path / "x")
    assert precision == 4 and back["a"].dtype == np.float32 and np.array_equal(back["a"], a)


def test_header_layout(tmp_path):
    checkpoint.save(tmp_path / "x", {"a": np.ones(1)})
    blob = (tmp_path / "x").read_bytes()
    assert blob[:8] == b"STWVCKPT" and blob[8:10] == b"\x01\x00" and blob[10] == 8


@pytest.mark.parametrize("damage,msg", [
    (lambda b: b"NOTACKPT" + b[8:], "bad magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"xx", "trailing"),
    (lambda b: b[:8] + b"\x09\x00" + b[10:], "format version"),
    (lambda b: b[:10] + b"\x03" + b[11:], "precision"),
])
def test_damaged_files_are_rejected(tmp_path, damage, msg):
    checkpoint.save(tmp_path / "x", {"a": np.arange(4.0)})
    (tmp_path / "x").write_bytes(damage((tmp_path / "x").read_bytes()))
    with pytest.raises(CheckpointError, match=msg):
        checkpoint.load(tmp_path / "x")


def test_streams_are_addressable_by_name():
    a = rng.stream(7, "param", "layers.0.filter.weight").random(5)
    b = rng.stream(7, "param", "layers.0.filter.weight").random(5)
    c = rng.stream(7, "param", "layers.0.gate.weight").random(5)
    d = rng.stream(8, "param", "layers.0.filter.weight").random(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c) and not np.array_equal(a, d)


def test_stream_key_is_documented_blake2b_philox():
    import hashlib

    key = int.from_bytes(hashlib.blake2b(b"7/param/x", digest_size=16).digest(), "little")
    expect = np.random.Generator(np.random.Philox(key=key)).random(3)
    assert np.array_equal(rng.stream(7, "param", "x").random(3), expect)
