"""Stage-keyed seed derivation.

Each pipeline stage draws its randomness from ``derive_seed(master, stage)``,
so adding or reordering stages never shifts another stage's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    """SHA-256 of the master seed and stage keys, truncated to 63 bits."""
    text = "/".join([str(int(master)), *map(str, keys)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def stage_rng(master: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
