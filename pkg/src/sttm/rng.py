"""Seeded, named random streams on top of the Philox counter-based generator.

Every stochastic choice in the package (weight init, batch shuffling, mixup
draws, diffusion timesteps, conditioning masks, substitution draws, candidate
pools) pulls from a stream addressed by a string name. Stream keys are derived
from (root seed, name) by hashing, so streams are independent of each other
and of the order in which they are created. Same seed + same name = same
sequence, on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng"]


def _stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    """Root of all randomness for one run.

    `stream(name)` returns a fresh `numpy.random.Generator` whose state depends
    only on (seed, name). Calling it twice with the same name restarts the
    stream, so callers that need a persistent stream keep the generator around.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=_stream_key(self.seed, name)))

    def child(self, name: str) -> "Rng":
        """Derive a sub-root, e.g. one per training phase."""
        return Rng(_stream_key(self.seed, name) & 0xFFFFFFFFFFFFFFFF)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed})"
