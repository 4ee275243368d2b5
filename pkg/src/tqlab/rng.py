"""Seeded, splittable random streams keyed by names."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class RngStreams:
    """Independent generators addressed by a path of keys.

    ``RngStreams(7).spawn("p0", "tq_direct").gen("step", 3)`` always yields
    the same generator, regardless of what other streams were used before.
    """

    def __init__(self, seed: int, keys: tuple = ()):
        self.seed = int(seed)
        self.keys = tuple(keys)

    def spawn(self, *keys) -> "RngStreams":
        return RngStreams(self.seed, self.keys + keys)

    def gen(self, *keys) -> np.random.Generator:
        path = self.keys + keys
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(k) for k in path))
        return np.random.default_rng(ss)

    def __repr__(self):
        return f"RngStreams(seed={self.seed}, keys={self.keys})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStreams):
        return rng.gen()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
