"""Deterministic random-number streams.

Every stochastic component draws from its own named counter-based (Philox)
stream keyed by (run seed, chain index, purpose), so adding or reordering
unrelated updates cannot silently shift the draws consumed by another
component.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, chain: int, purpose: str) -> np.random.Generator:
    """Return the generator for one (seed, chain, purpose) triple."""
    key = (int(seed), int(chain), zlib.crc32(purpose.encode("ascii")))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class RngStreams:
    """Lazy cache of named streams for a single chain."""

    def __init__(self, seed: int, chain: int = 0):
        self.seed = int(seed)
        self.chain = int(chain)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, purpose: str) -> np.random.Generator:
        gen = self._streams.get(purpose)
        if gen is None:
            gen = stream(self.seed, self.chain, purpose)
            self._streams[purpose] = gen
        return gen
