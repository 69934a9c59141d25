"""Deterministic, splittable random streams.

Every stream is keyed by (seed, *tags) through a stable hash, so any
consumer can recreate exactly its own stream without threading generator
state through the program. Counter-based Philox keeps streams independent.
"""

import hashlib

import numpy as np


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Return a generator keyed by the seed and an arbitrary tag tuple.

    Tags may be strings or integers; the same (seed, tags) always yields
    the same stream, across processes and platforms.
    """
    material = repr((int(seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))
