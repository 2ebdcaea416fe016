"""Deterministic random streams.

Every random draw in the project flows from a single 64-bit seed through
Philox, a counter-based generator.  A stream is addressed by (seed, *labels):
the labels are hashed into the Philox key, so streams for different purposes
("init/theta", "sample/train_00042", ...) are independent and reproducible
regardless of the order in which they are created or consumed.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> int:
    """128-bit Philox key derived from the seed and a label path."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for one purpose, e.g. stream(seed, "init", "theta")."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))
