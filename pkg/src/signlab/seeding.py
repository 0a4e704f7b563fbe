"""Deterministic RNG derivation.

Every sampled object in the project gets its generator from child_rng(seed, *tags),
so sample i of any stream is a pure function of (seed, i) and never of draw order.
"""

import hashlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def child_rng(seed: int, *tags) -> np.random.Generator:
    entropy = [int(seed)] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
