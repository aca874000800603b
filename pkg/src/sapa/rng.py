"""Named deterministic random streams derived from one master seed."""

from __future__ import annotations

import hashlib
import random

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, name: str) -> int:
    """Return a 64-bit seed for stream ``name``.

    Derivation hashes the pair, so adding a new stream never shifts the
    values seen by an existing one.
    """
    digest = hashlib.sha256(f"{master_seed & MASK64}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str) -> random.Random:
    return random.Random(derive_seed(master_seed, name))


def np_stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, name)))


class StreamRegistry:
    """Lazily created named streams; one per subsystem."""

    def __init__(self, master_seed: int):
        self.master_seed = master_seed & MASK64
        self._streams: dict[str, random.Random] = {}

    def __getitem__(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            rng = self._streams[name] = stream(self.master_seed, name)
        return rng

    def names(self) -> list[str]:
        return sorted(self._streams)
