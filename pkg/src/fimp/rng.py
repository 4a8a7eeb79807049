"""Counter-based random streams keyed by purpose.

Each stochastic consumer asks for its own stream, keyed by the run seed plus
whatever identifies it (client id, round, purpose string).  Streams are Philox
generators seeded from a ``SeedSequence`` over the key, so results never depend
on the order in which consumers run.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_word(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key parts must be non-negative, got {part}")
    return int(part)


def stream(seed: int, *key: int | str) -> np.random.Generator:
    entropy = [_key_word(seed), *(_key_word(k) for k in key)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
