"""Keyed, counter-based random streams.

Every draw is a pure function of ``(seed, key..., index...)`` so particles and
coordinates can be sampled in any order, in bulk, and still reproduce the
exact same numbers. The mixing function is the SplitMix64 finalizer applied
once per key level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(x):
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def _absorb(state, index):
    idx = np.asarray(index).astype(np.uint64) + np.uint64(1)
    with np.errstate(over="ignore"):
        return _mix(state + idx * _GOLDEN)


def _to_unit(h):
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class RngStream:
    """A node in a tree of independent random streams.

    ``RngStream(seed).child(step).child(particle)`` and
    ``RngStream(seed).child(step).keys(particles)`` address the same streams;
    the latter does it for a whole array of particle indices at once.
    """

    seed: int
    key: tuple[int, ...] = ()
    _state: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        h = _mix(np.asarray(np.uint64(int(self.seed) & _MASK64)) ^ _GOLDEN)
        for k in self.key:
            h = _absorb(h, k)
        object.__setattr__(self, "_state", h)

    def child(self, *key: int) -> RngStream:
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def keys(self, *index_arrays) -> np.ndarray:
        """Broadcast hierarchical sub-keys (one hash round per index level)."""
        h = self._state
        for idx in index_arrays:
            h = _absorb(h, idx)
        return np.asarray(h, dtype=np.uint64)

    def uniform(self, *index_arrays) -> np.ndarray:
        """Uniform [0, 1) draws addressed by the given index levels.

        The last index level is the draw counter.
        """
        if not index_arrays:
            raise ValueError("at least one index level (the draw counter) is required")
        return _to_unit(self.keys(*index_arrays))


def uniform_from_keys(keys: np.ndarray, draw) -> np.ndarray:
    """Draw number ``draw`` from each stream addressed by ``keys``."""
    return _to_unit(_absorb(keys, draw))
