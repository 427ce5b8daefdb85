"""Named, reproducible random streams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for the stream named by ``path`` under ``seed``.

    ``substream(7, "shuffle", "round-3", "client-1")`` always yields the same
    draws, independent of which other streams were used before it.
    """
    key = "/".join(str(p) for p in path).encode()
    words = np.frombuffer(hashlib.sha256(key).digest()[:16], dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, words)]))
