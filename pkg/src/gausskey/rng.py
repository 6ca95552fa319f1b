"""Seeded random streams.

Every random draw in the package comes from ``stream(seed, label)``: a
numpy ``Generator`` over PCG64 whose ``SeedSequence`` entropy is the 64-bit
run seed and whose spawn key is the CRC-32 of a fixed component label
(e.g. ``"dynamics.init"``). Distinct labels give statistically independent
streams from one ``--seed`` flag, and adding a new component never shifts
the draws of an existing one.
"""

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=(label_key(label),))
    return np.random.Generator(np.random.PCG64(ss))
