"""Deterministic counter-based random streams.

Every stochastic operation in the package derives its draws from a Philox
counter generator keyed by (seed, purpose tag, index).  Philox is a pure
counter-mode generator, so a stream's output depends only on its key: draws
are reproducible bit-for-bit regardless of evaluation order, vectorization
width, or worker count.  Purpose tags keep streams from colliding when one
user-facing seed feeds several kinds of draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

# purpose tags (second key word, high bits); values are arbitrary but frozen
NOISE = 1      # parameter-space Gaussian noise blocks
LATENT = 2     # generator latent vectors
CLF = 3        # classifier Monte-Carlo streams (timesteps + eta draws)
SIGN = 4       # Rademacher draws (random directions, private patterns)
DATA = 5       # synthetic task data
INIT = 6       # model initialization

_MASK64 = (1 << 64) - 1
_MASK48 = (1 << 48) - 1


def mix_seed(*parts: int | str) -> int:
    """Collapse ints and strings into a stable 64-bit stream key.

    The mapping is a fixed injective encoding fed through SHA-256, so it is
    stable across platforms, Python versions, and process boundaries.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            raise TypeError("booleans are ambiguous seed parts; pass an int")
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "little") + raw)
        else:
            raise TypeError(f"cannot mix {type(part).__name__} into a seed")
    return int.from_bytes(h.digest()[:8], "little")


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Return the Philox stream for (seed, purpose, index).

    ``index`` distinguishes parallel sub-streams of one purpose, e.g. the
    per-block noise streams of a single parameter draw.
    """
    if not 0 <= index <= _MASK48:
        raise ValueError("stream index out of the 48-bit range")
    key = np.array(
        [seed & _MASK64, ((purpose & 0xFFFF) << 48) | index], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))
