"""Versioned binary container for named tensors.

Layout (all integers little-endian)::

    magic        8 bytes   b"STWVCKPT"
    version      u16       FORMAT_VERSION
    precision    u8        4 (f32) or 8 (f64)
    meta_len     u32       then meta_len bytes of UTF-8 JSON (may be "{}")
    n_records    u32
    per record:
      name_len   u16, then UTF-8 name
      rank       u8, then rank x u64 extents
      payload    prod(extents) IEEE-754 values, little-endian, row-major
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from stwave.errors import CheckpointError

MAGIC = b"STWVCKPT"
FORMAT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None, precision: int | None = None):
    """Write ``tensors`` (name -> array) and a JSON-serializable ``meta`` atomically."""
    arrays = {name: np.asarray(a) for name, a in tensors.items()}
    if precision is None:
        sizes = {a.dtype.itemsize for a in arrays.values()} or {8}
        precision = max(sizes)
    if precision not in _DTYPES:
        raise CheckpointError(f"unsupported precision tag {precision}")
    dtype = _DTYPES[precision]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HBI", FORMAT_VERSION, precision, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype=dtype).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict, int]:
    """Return ``(tensors, meta, precision)``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, precision, meta_len = struct.unpack_from("<HBI", blob, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        if precision not in _DTYPES:
            raise CheckpointError(f"{path}: unknown precision tag {precision}")
        dtype = _DTYPES[precision]
        pos = 15
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            nbytes = n * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            tensors[name] = np.frombuffer(blob, dtype=dtype, count=n, offset=pos).reshape(shape).astype(
                dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors, meta, precision
