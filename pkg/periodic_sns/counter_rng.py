"""
Counter-based random numbers.

Every draw is a pure function of (seed, stream, counter): there is no hidden
generator state, so ranges can be extended, shifted and split across workers
without changing a single bit of the values already produced. The mixing
function is the SplitMix64 finaliser.
"""

from typing import Union

import numpy as np
from scipy.special import ndtri

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK64
    return z ^ (z >> 31)


def hash64(*parts: int) -> int:
    """
    Fold integers (negative ones by their two's-complement bit pattern) into a
    single 64-bit value. `hash64(master_seed, replica)` derives replica seeds.
    """
    z = 0
    for part in parts:
        z = _mix64_int(z ^ ((int(part) + _GOLDEN) & _MASK64))
    return z


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MUL1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def raw_bits(seed: int, stream: int, counters: Union[np.ndarray, range]) -> np.ndarray:
    key = np.uint64(hash64(seed, stream))
    # int64 -> uint64 reinterprets negative counters bit for bit
    c = np.asarray(counters, dtype=np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(_mix64(c + np.uint64(_GOLDEN)) ^ key)


def uniforms(seed: int, stream: int, counters: Union[np.ndarray, range]) -> np.ndarray:
    """Uniform draws in the open interval (0, 1)."""
    bits = raw_bits(seed, stream, counters)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, stream: int, counters: Union[np.ndarray, range]) -> np.ndarray:
    """Standard normal draws by inverse CDF of `uniforms`."""
    return ndtri(uniforms(seed, stream, counters))
