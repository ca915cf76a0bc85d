"""Seeded random streams and the FNV-1a 64 string hash.

Every random draw in the package goes through :func:`stream`, which builds a
Philox (counter-based) generator keyed by a seed plus a path of names, so
that independent consumers never share state and results do not depend on
call order.
"""

from __future__ import annotations

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def _words(part: str | int) -> list[int]:
    if isinstance(part, str):
        h = fnv1a64(part)
        return [h & 0xFFFFFFFF, h >> 32]
    if part < 0:
        raise ValueError(f"stream key components must be non-negative, got {part}")
    return [int(part)]


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *path)``."""
    entropy = [int(seed)]
    for part in path:
        entropy.extend(_words(part))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
