import math
from dataclasses import dataclass, replace

import numpy as np

from periodic_sns import counter_rng

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class WienerStore:
    """
    Two-sided grid increments ΔW_i(n) = W_i(t_{n+1}) − W_i(t_n) ~ N(0, dt) for
    channels 0 ≤ i < channels and n_min ≤ n < n_max.

    Values are never stored: ΔW_i(n) is a pure function of
    (master_seed, i, n + offset), so extending the range keeps every existing
    value and a Wiener shift is exact index arithmetic.
    """

    master_seed: int
    dt: float
    channels: int
    n_min: int
    n_max: int
    offset: int = 0

    def __post_init__(self) -> None:
        if not self.dt > 0 or not math.isfinite(self.dt):
            raise ValueError(f"dt must be positive and finite, got {self.dt!r}")
        if self.channels < 0:
            raise ValueError(f"Channel count must be non-negative, got {self.channels}")
        if self.n_min > self.n_max:
            raise ValueError(f"Invalid index range [{self.n_min}, {self.n_max})")
        for value in (self.n_min + self.offset, self.n_max + self.offset):
            if not _INT64_MIN <= value <= _INT64_MAX:
                raise ValueError(f"Index range [{self.n_min}, {self.n_max}) shifted by {self.offset} overflows")

    def covers(self, n0: int, n1: int) -> bool:
        return self.n_min <= n0 and n1 <= self.n_max

    def window(self, n0: int, n1: int) -> np.ndarray:
        """Increments for indices n0 ≤ n < n1, shape (n1 − n0, channels)."""
        if not self.covers(n0, n1):
            raise ValueError(f"Requested increments [{n0}, {n1}) outside the store range [{self.n_min}, {self.n_max})")
        counters = np.arange(n0, n1, dtype=np.int64) + np.int64(self.offset)
        out = np.empty((n1 - n0, self.channels))
        scale = math.sqrt(self.dt)
        for i in range(self.channels):
            out[:, i] = counter_rng.normals(self.master_seed, i, counters) * scale
        return out

    @property
    def increments(self) -> np.ndarray:
        return self.window(self.n_min, self.n_max)

    def increment(self, channel: int, n: int) -> float:
        if not 0 <= channel < self.channels:
            raise ValueError(f"No channel {channel} in a {self.channels}-channel store")
        return float(self.window(n, n + 1)[0, channel])

    def extended(self, n_min: int, n_max: int) -> "WienerStore":
        return replace(self, n_min=min(n_min, self.n_min), n_max=max(n_max, self.n_max))


def derive_wiener_store(master_seed: int, dt: float, channels: int, n_min: int, n_max: int) -> WienerStore:
    return WienerStore(int(master_seed), float(dt), int(channels), int(n_min), int(n_max))


def replica_store(master_seed: int, replica: int, dt: float, channels: int, n_min: int, n_max: int) -> WienerStore:
    """Store of replica `replica`, seeded by hash64(master_seed, replica)."""
    return derive_wiener_store(counter_rng.hash64(master_seed, replica), dt, channels, n_min, n_max)


def shift_wiener(store: WienerStore, steps: int) -> WienerStore:
    """θ_{steps·dt}: increment n of the result is increment n + steps of `store`."""
    return replace(store, n_min=store.n_min - steps, n_max=store.n_max - steps, offset=store.offset + steps)
