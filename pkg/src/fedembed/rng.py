"""Keyed deterministic random streams.

Every source of randomness in a run (client selection, negative sampling,
dropout masks, noise, initialization) draws from a stream addressed by a
(seed, purpose tag, *integer key parts) tuple. Identical keys always yield
identical sequences, independent of how many other streams were consumed
in between, which is what makes worker-parallel simulation bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest(seed: int, tag: str, parts: tuple[int, ...]) -> int:
    h = hashlib.blake2s(digest_size=16)
    h.update(str(seed).encode())
    h.update(b"|")
    h.update(tag.encode())
    for p in parts:
        h.update(b"|")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Factory for independent, reproducible numpy generators."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, tag: str, *parts: int) -> np.random.Generator:
        """Fresh generator for (seed, tag, parts); same key, same sequence."""
        seq = np.random.SeedSequence(_digest(self.seed, tag, parts))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, tag: str, *parts: int) -> "RngStream":
        """Derived stream whose keys are namespaced under this one."""
        return RngStream(_digest(self.seed, tag, parts) & 0x7FFFFFFFFFFFFFFF)
