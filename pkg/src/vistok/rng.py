"""Splittable counter-based random streams.

A single root seed fans out into named child streams (Philox underneath),
so every stochastic op draws from an explicitly passed stream and runs are
reproducible regardless of call order elsewhere in the program.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _tag_hash(tag) -> int:
    # Stable across processes; id()-based hashing would not be.
    raw = repr(tag).encode("utf-8")
    return int.from_bytes(hashlib.blake2s(raw, digest_size=4).digest(), "little")


class RngStream:
    """One independent random stream plus the ability to derive children.

    Children are keyed by arbitrary (repr-stable) tags, e.g.
    ``stream.child("codebook-init")`` or ``stream.child(("step", 17))``.
    The same (seed, tag path) always yields the same stream.
    """

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = _spawn_key
        ss = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, tag) -> "RngStream":
        return RngStream(self.seed, self.spawn_key + (_tag_hash(tag),))

    # Convenience draws; all return float32 where the consumer stores f32.
    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self.gen.standard_normal(size=shape) * scale).astype(np.float32)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, options, p=None):
        return self.gen.choice(options, p=p)

    def state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state
