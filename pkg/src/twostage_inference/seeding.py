"""Deterministic per-replicate random streams.

Every replicate owns one generator whose seed is a 64-bit mix of the master
seed, the replicate index and a stage tag::

    h = splitmix64(master mod 2**64)
    h = splitmix64(h XOR index)
    h = splitmix64(h XOR STAGE_TAGS[tag])
    rng = numpy.random.Generator(numpy.random.PCG64(h))

``splitmix64(x)`` adds 0x9E3779B97F4A7C15 to ``x`` and applies the usual
finaliser (xor-shift 30, multiply 0xBF58476D1CE4E5B9, xor-shift 27,
multiply 0x94D049BB133111EB, xor-shift 31), all modulo 2**64.

Because the stream depends only on ``(master, index, tag)``, results do not
depend on how replicates are batched or spread over workers.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

STAGE_TAGS = {
    "replicate": 1,
    "reference": 2,
    "population": 3,
    "coupling": 4,
    "cell": 5,
}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, index: int, tag: str) -> int:
    h = splitmix64(int(master) & MASK64)
    h = splitmix64(h ^ (int(index) & MASK64))
    return splitmix64(h ^ STAGE_TAGS[tag])


def stream(master: int, index: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, index, tag)))
