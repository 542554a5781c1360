"""Deterministic, independently addressable random streams.

Every stochastic step in the pipeline draws from a counter-based generator
keyed by the master seed plus a tuple of string/int tags (e.g.
``stream(seed, "split")`` or ``stream(seed, "metatrain", "train", epoch)``).
Streams are independent of each other and reproducible across runs and
platforms, which is what makes command reruns byte-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np

Tag = int | str


def _tag_entropy(tag: Tag) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, *tags: Tag) -> np.random.Generator:
    """Return a Philox generator for the (master_seed, *tags) stream."""
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    entropy = [int(master_seed)] + [_tag_entropy(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
