"""Deterministic random-stream derivation.

Every random choice in the package flows from a single 64-bit master seed.
Child streams are opened with ``spawn(master, *path)`` where the path is a
sequence of labels and counters hashed into a numpy SeedSequence.  Equal
(master, path) always opens the identical stream, so any operation that
derives its randomness this way is a pure function of its seed argument.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def spawn(master_seed: int, *path) -> np.random.Generator:
    """Open the child random stream addressed by ``path`` under the master seed."""
    entropy = [int(master_seed) & _MASK64] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(master_seed: int, *path) -> int:
    """A 64-bit integer naming the child stream at ``path`` (safe to log and replay)."""
    entropy = [int(master_seed) & _MASK64] + [_encode(p) for p in path]
    words = np.random.SeedSequence(entropy).generate_state(2)
    return int(words[0]) | (int(words[1]) << 32)
