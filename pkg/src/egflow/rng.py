"""Deterministic named random streams.

All randomness in a run flows from one 64-bit root seed. Each purpose
(data generation, parameter init, training draws, evaluation rollouts)
gets its own named stream, so adding e.g. extra evaluation calls never
perturbs the training draws.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for `name`, reproducible across processes."""
    seq = np.random.SeedSequence([int(seed) & _MASK64, _name_key(name)])
    return np.random.default_rng(seq)


class RngStreams:
    """Lazily materialized named streams hanging off a single root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        stream = self._streams.get(name)
        if stream is None:
            stream = named_stream(self.seed, name)
            self._streams[name] = stream
        return stream
