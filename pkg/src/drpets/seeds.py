"""Deterministic stream derivation: one master seed, many named substreams.

Streams are derived counter-style through ``numpy.random.SeedSequence`` with
``spawn_key = (crc32(purpose), *indices)``, so every (purpose, index...)
combination owns an independent stream, parallel consumers never share one,
and permuting the order of work cannot change any stream's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def child_sequence(master_seed: int, purpose: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed,
                                  spawn_key=(stream_key(purpose), *indices))


def substream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(child_sequence(master_seed, purpose, *indices))


def substream_seed(master_seed: int, purpose: str, *indices: int) -> int:
    """A derived 63-bit integer seed, for APIs that take plain seeds."""
    return int(child_sequence(master_seed, purpose, *indices).generate_state(1, np.uint64)[0] >> 1)
