"""Named, seed-keyed random streams.

Each consumer (weight init, batch sampling, masks, dropout, ...) gets its own
generator derived from the run seed and a stream name, so adding draws in
one place never shifts the randomness seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
