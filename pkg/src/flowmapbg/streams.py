"""Named RNG streams: every random draw descends from one root seed
through (purpose, index) keys, so results do not depend on call order."""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(purpose: str, index: int = 0) -> tuple[int, int]:
    digest = hashlib.blake2s(purpose.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little"), int(index)


def stream(root_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=stream_key(purpose, index))
    return np.random.default_rng(seq)
