"""Counter-based random streams.

Every stream is a Philox generator keyed by (root seed, label, block).  A
block of samples always sees the same numbers whichever worker draws it,
so results do not depend on how blocks are scheduled.
"""
from __future__ import annotations

import hashlib

import numpy as np


def label_key(label):
    """Stable 32-bit integer derived from a text label."""
    return int.from_bytes(hashlib.sha256(str(label).encode()).digest()[:4], "little")


def stream(seed, label, block=0):
    ss = np.random.SeedSequence(int(seed), spawn_key=(label_key(label), int(block)))
    return np.random.Generator(np.random.Philox(ss))
