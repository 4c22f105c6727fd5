"""Deterministic named substreams.

All randomness in the package flows from one root seed through named
substreams, so any component can be re-run in isolation and produce the
same draws regardless of what else consumed randomness before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "stream_key"]


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def substream(seed: int, *names: str) -> np.random.Generator:
    """Generator for the substream addressed by ``names`` under ``seed``.

    substream(7, "data", "episodes") is independent of substream(7, "init")
    and identical across calls and processes.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stream_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
