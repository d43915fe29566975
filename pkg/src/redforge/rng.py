"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for ``seed`` keyed by ``names`` (strings or ints).

    Streams with different names are statistically independent, so one
    component can be re-seeded without perturbing another.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)
