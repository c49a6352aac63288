"""Named deterministic random streams.

Every random draw in the project comes from a stream addressed by a key
tuple like ``(seed, "init", "blocks/block00/ffn1/w1")``. Keys hash to
seed material with blake2s, so the mapping is stable across platforms
and process runs, and streams are independent of creation order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*keys) -> int:
    """Collapse a key tuple into a stable 64-bit integer."""
    h = hashlib.blake2s(digest_size=8)
    for k in keys:
        if isinstance(k, str):
            h.update(b"s")
            h.update(k.encode("utf-8"))
        elif isinstance(k, (int, np.integer)):
            h.update(b"i")
            h.update(int(k).to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"rng keys must be str or int, got {type(k)!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def stream(*keys) -> np.random.Generator:
    """A fresh PCG64 generator for the given key tuple."""
    return np.random.default_rng(np.random.SeedSequence(derive_key(*keys)))
