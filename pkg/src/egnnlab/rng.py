"""Seeded random streams.

Every stream is Philox4x64-10 (a counter-based generator with a published
algorithm) keyed by ``(seed, stream_id)``.  Uniform doubles are produced by
numpy's documented ``(u64 >> 11) * 2**-53`` mapping, so any language with a
Philox implementation can reproduce our datasets and initial weights.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1

# Stream-id namespaces keep unrelated consumers of one seed independent.
STREAM_STRUCTURE = 0
STREAM_SPLIT = 1 << 62
STREAM_INIT = 2 << 62
STREAM_SHUFFLE = 3 << 62


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    key = np.array([seed & MASK64, stream_id & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(global_seed: int, path: str) -> int:
    """Nested seed for a config path, e.g. ``derive_seed(7, "data.seed")``.

    First 8 bytes (little endian) of sha256(f"{global_seed}:{path}").
    """
    digest = hashlib.sha256(f"{int(global_seed)}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
