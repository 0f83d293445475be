"""Counter-based random streams keyed by ``(seed, stream, ids...)``.

Every draw is addressed by its key and position, so any single entry can be
regenerated without replaying earlier draws and disjoint streams never interact.
Backed by numpy's Philox4x64 counter generator.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# bit widths of (stream, id0, id1, id2) packed into the second key word
_FIELDS = (8, 16, 16, 24)


def _key(seed: int, stream: int, ids: tuple[int, ...]) -> np.ndarray:
    if len(ids) > len(_FIELDS) - 1:
        raise ValueError(f"at most {len(_FIELDS) - 1} stream ids supported")
    word, shift = 0, 0
    for value, width in zip((stream,) + tuple(ids), _FIELDS):
        value = int(value)
        if not 0 <= value < (1 << width):
            raise ValueError(f"stream id {value} does not fit in {width} bits")
        word |= value << shift
        shift += width
    return np.array([int(seed) & _MASK64, word], dtype=np.uint64)


def raw_stream(seed: int, stream: int, *ids: int, start: int = 0, count: int = 1) -> np.ndarray:
    """``count`` raw 64-bit words from positions ``start .. start+count-1``."""
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    block, offset = divmod(start, 4)
    gen = np.random.Philox(key=_key(seed, stream, ids), counter=block)
    return gen.random_raw(offset + count)[offset:]


def uniform_stream(seed: int, stream: int, *ids: int, start: int = 0, count: int = 1) -> np.ndarray:
    """Uniform doubles in ``[0, 1)`` at the addressed positions."""
    raw = raw_stream(seed, stream, *ids, start=start, count=count)
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for run ``path`` of a batch rooted at ``seed``."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *[int(v) for v in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
