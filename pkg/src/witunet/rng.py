"""Counter-based SplitMix64 random streams.

Everything random in this repo (phantoms, noise fields, augmentation draws,
shuffles, parameter init) comes from one documented generator so a seed pins
the whole pipeline bit-for-bit within a build. Stream element i is
``finalize(seed + (i+1) * GOLDEN)``, which equals the classic sequential
SplitMix64 stream but lets us generate whole fields vectorized and derive
parallel-safe per-item seeds.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, *indices: int) -> int:
    """Fold indices into a base seed; distinct index tuples give distinct streams."""
    s = base & _MASK64
    for ix in indices:
        s = _finalize((s + (ix + 1) * _GOLDEN) & _MASK64)
    return s


def splitmix_array(seed: int, n: int) -> np.ndarray:
    """First n stream elements for `seed`, as uint64."""
    with np.errstate(over="ignore"):
        counters = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & _MASK64) + counters * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def uniform_field(seed: int, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Uniform [lo, hi) float32 field, one stream element per entry."""
    n = int(np.prod(shape)) if shape else 1
    bits = splitmix_array(seed, n)
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
    out = (lo + (hi - lo) * u).astype(np.float32)
    return out.reshape(shape)


def gaussian_field(seed: int, shape) -> np.ndarray:
    """Standard-normal float32 field via Box-Muller on the uniform stream."""
    n = int(np.prod(shape)) if shape else 1
    npairs = (n + 1) // 2
    bits = splitmix_array(seed, 2 * npairs)
    # u1 in (0,1] so log() is finite; u2 in [0,1)
    u1 = ((bits[:npairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (bits[npairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * math.pi) * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.astype(np.float32).reshape(shape)


class Rng:
    """Scalar draws (ints, uniforms, normals, shuffles) from one SplitMix64 stream."""

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._counter = 0
        self._spare_normal = None

    def next_u64(self) -> int:
        self._counter += 1
        return _finalize((self._seed + self._counter * _GOLDEN) & _MASK64)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi). Modulo bias is negligible for our small ranges."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + self.next_u64() % (hi - lo)

    def normal(self) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
            return z
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(0, len(items))]
