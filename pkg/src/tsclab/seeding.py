"""Sub-seed derivation.

Every random draw in a run comes from a generator seeded by
``derive_seed(master, *tags)``.  The tags name the purpose of the draw
(``"stream"``, ``"probe"``, a task index, ...), so adding a new consumer
never shifts the numbers seen by an existing one.

Mixing scheme: each tag is reduced to a 64-bit word (integers are taken
modulo 2**64, strings through an 8-byte BLAKE2b digest).  Starting from the
master seed, the state absorbs each word as ``state = splitmix64(state ^
word)``; the final state is the derived seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _tag_word(tag) -> int:
    if isinstance(tag, (bool, np.bool_)):
        return int(tag)
    if isinstance(tag, (int, np.integer)):
        return int(tag) & MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported seed tag {tag!r}")


def derive_seed(master: int, *tags) -> int:
    state = splitmix64(int(master) & MASK64)
    for tag in tags:
        state = splitmix64(state ^ _tag_word(tag))
    return state


def rng_for(master: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
