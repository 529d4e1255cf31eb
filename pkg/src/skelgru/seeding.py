"""Deterministic RNG derivation.

Every stochastic component draws from a generator derived from the run
seed plus a purpose tag, so reruns reproduce exactly and no component's
draws shift when another component changes how much randomness it uses.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    text = ":".join([str(int(seed))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
