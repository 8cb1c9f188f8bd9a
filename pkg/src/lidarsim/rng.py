"""Counter-based uniform variates keyed by (seed, stream, cell index).

Every draw is a pure function of its key, so results do not depend on
evaluation order or on how the work is split across threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

STREAM_RAYDROP = 1
STREAM_RANDOM_DROP = 2


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int) -> np.ndarray:
    s = np.array([int(seed) & _MASK64], dtype=np.uint64)
    st = np.array([int(stream) & _MASK64], dtype=np.uint64)
    return _mix(s ^ _mix(st + _GOLDEN))


def uniforms(seed: int, counters: np.ndarray, stream: int = 0) -> np.ndarray:
    """Uniform [0, 1) doubles, one per counter value."""
    k = _key(seed, stream)
    c = np.asarray(counters).astype(np.uint64)
    z = _mix(_mix(k + (c + np.uint64(1)) * _GOLDEN) ^ k)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def grid_uniforms(seed: int, shape: tuple[int, int], stream: int = 0, threads: int = 1) -> np.ndarray:
    """Uniforms for every (row, col) cell, counter = row * cols + col."""
    rows, cols = shape
    out = np.empty((rows, cols))

    def fill(r):
        out[r] = uniforms(seed, np.arange(r * cols, (r + 1) * cols, dtype=np.uint64), stream)

    if threads <= 1:
        for r in range(rows):
            fill(r)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, range(rows)))
    return out


def bernoulli_grid(p: np.ndarray, seed: int, stream: int = 0, threads: int = 1) -> np.ndarray:
    """Independent Bernoulli(p) per cell as a uint8 mask."""
    p = np.asarray(p, dtype=np.float64)
    u = grid_uniforms(seed, p.shape, stream, threads)
    return (u < p).astype(np.uint8)
