"""Deterministic RNG derivation from structured seed material.

Every random draw in the package flows through a generator derived here, so
any output is a pure function of (inputs, seed). Nested tuples of ints,
strings and floats hash to stable entropy across platforms and runs.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def seed_material(*parts) -> list[int]:
    h = hashlib.blake2s()

    def feed(x):
        if isinstance(x, (tuple, list)):
            h.update(b"(")
            for item in x:
                feed(item)
            h.update(b")")
        elif isinstance(x, str):
            h.update(b"s" + x.encode("utf-8") + b"\x00")
        elif isinstance(x, bool):
            h.update(b"b1" if x else b"b0")
        elif isinstance(x, (int, np.integer)):
            h.update(b"i" + int(x).to_bytes(16, "little", signed=True))
        elif isinstance(x, (float, np.floating)):
            h.update(b"f" + struct.pack("<d", float(x)))
        elif x is None:
            h.update(b"n")
        else:
            raise TypeError(f"cannot derive seed material from {type(x).__name__}")

    feed(parts)
    return [int(x) for x in np.frombuffer(h.digest(), dtype=np.uint32)]


def rng_for(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material(*parts))))
