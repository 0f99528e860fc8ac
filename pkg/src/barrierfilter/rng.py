"""Keyed random streams.

Every random draw in the package comes from a :class:`numpy.random.Generator`
backed by Philox, a counter-based bit generator. Streams are addressed by a
master seed plus a tuple of non-negative integer keys (trial, purpose, step,
...), so the stream a computation sees depends only on *what* it is, never on
the order in which work was scheduled.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    """Second-level key separating independent uses within a trial."""

    OBS_MATRIX = 0
    TRUTH = 1
    PRIOR = 2
    FILTER = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for ``(seed, *key)``.

    Two calls with the same arguments give generators producing identical
    sequences; distinct keys give statistically independent sequences.
    """
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("seed and keys must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
