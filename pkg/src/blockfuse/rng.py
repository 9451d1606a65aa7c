"""Reproducible counter-based random number streams.

Every stochastic routine in the package receives a ``numpy.random.Generator``
backed by the counter-based Philox engine.  Substreams are derived by hashing
(seed, label...) tuples with a 64-bit avalanche mixer, so any unit of work --
a bootstrap cell, a training field, a Monte Carlo replicate -- owns a stream
that can be reproduced in isolation and is independent of execution order or
worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def mix64(*parts: int) -> int:
    """Avalanche-mix integer parts into a single 64-bit substream seed."""
    if not parts:
        raise ValueError("mix64 needs at least one part")
    x = 0
    for p in parts:
        x = _splitmix64((x ^ (int(p) & _MASK64)) & _MASK64)
    return x


def stream(*parts: int) -> np.random.Generator:
    """Return the Philox generator keyed by ``mix64(*parts)``."""
    return np.random.Generator(np.random.Philox(key=mix64(*parts)))
