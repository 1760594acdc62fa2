"""Named, counter-based random streams derived from one root seed.

Each (root seed, name, *index) triple maps to its own Philox stream, so a
partial rerun (say, sampling only) draws exactly the numbers the full run drew.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "training", "sampling", "eval", "analysis")


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_key(name),) + tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


def initial_noise(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """z_1 ~ N(0, I) shared by every sampler run with the same seed."""
    return stream(seed, "sampling").standard_normal(shape)
