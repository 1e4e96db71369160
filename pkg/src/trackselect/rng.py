"""Named, versioned random streams.

Every stochastic draw in an episode comes from one top-level seed. Each
subsystem pulls from its own named sub-stream so extra draws in one place
never shift the numbers another subsystem sees.
"""

from __future__ import annotations

import zlib

import numpy as np

RNG_VERSION = "pcg64-v1"


def named_stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


class Streams:
    """Lazily created sub-streams keyed by name, all derived from ``seed``."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = named_stream(self.seed, name)
        return self._streams[name]

    def child_seed(self, name: str) -> int:
        return int(named_stream(self.seed, name).integers(0, 2**63 - 1))
