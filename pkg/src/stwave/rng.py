"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator (numpy's ``Philox``)
whose 128-bit key is the first 16 bytes of ``blake2b(f"{seed}/{label1}/{label2}...")``
and whose counter starts at zero.  Streams are therefore addressable by
name: a parameter named ``layers.0.filter.weight`` in a run with seed 7
always draws from the same sequence, independent of allocation order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *labels) -> int:
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Return an independent generator for ``(seed, *labels)``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *labels)))
