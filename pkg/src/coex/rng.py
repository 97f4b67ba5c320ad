"""Deterministic random number generation.

Every random draw in this package flows through :class:`Rng`, a lane-parallel
xoshiro256** generator seeded with splitmix64.  The exact algorithm is pinned
(see docs/formats.md) so that a run is reproducible bit-for-bit from its seed
alone: same seed, same draw sequence, on any build of this package.

Stream layout
-------------
* 1024 independent xoshiro256** lanes, each seeded from a splitmix64 sequence
  over the stream seed (lane ``i`` takes sequence elements ``4i .. 4i+3``).
* One generator step advances all lanes once and emits 1024 uint64 values in
  lane order.  Consumers draw from this stream through a buffer, so the
  sequence of values depends only on the total number of values requested.
* Uniform doubles use the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1).
* Gaussians use the Box-Muller transform on consecutive uniform pairs drawn
  from (0, 1]; ``normal(n)`` always consumes ``2 * ceil(n / 2)`` uniforms.
* Child streams are derived by hashing string/int tags into the parent seed
  with the splitmix64 finalizer (see :func:`derive_seed`).
"""

from __future__ import annotations

import math

import numpy as np

_LANES = 1024
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)
_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; accepts a scalar or an array of uint64."""
    with np.errstate(over="ignore"):  # wraparound is the algorithm
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _splitmix64_sequence(seed: int, n: int) -> np.ndarray:
    """First n outputs of splitmix64 started at ``seed`` (vectorized)."""
    ks = np.arange(1, n + 1, dtype=np.uint64)
    return _mix64(_U64(seed & _MASK64) + ks * _GOLDEN)


def _fnv1a64(data: bytes) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in data:
            h = (h ^ _U64(b)) * _FNV_PRIME
    return h


def derive_seed(seed: int, *tags: int | str) -> int:
    """Mix string/int tags into a seed, yielding an independent child seed.

    Tags are hashed one at a time (strings via FNV-1a over UTF-8, ints used
    directly), so ``derive_seed(s, "a", "b") != derive_seed(s, "ab")``.
    """
    x = _mix64(_U64(seed & _MASK64) ^ _GOLDEN)
    with np.errstate(over="ignore"):
        for tag in tags:
            if isinstance(tag, str):
                h = _fnv1a64(tag.encode("utf-8"))
            else:
                h = _U64(int(tag) & _MASK64)
            x = _mix64((x ^ h) + _GOLDEN)
    return int(x)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Rng:
    """Lane-parallel xoshiro256** stream with buffered draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        init = _splitmix64_sequence(self.seed, 4 * _LANES)
        self._s0 = init[0::4].copy()
        self._s1 = init[1::4].copy()
        self._s2 = init[2::4].copy()
        self._s3 = init[3::4].copy()
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0

    def _step(self) -> np.ndarray:
        """Advance all lanes once; return their 256 outputs in lane order."""
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        out = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s3 = _rotl(s3, 45)
        return out

    def u64(self, n: int) -> np.ndarray:
        """Next n raw uint64 values from the stream."""
        avail = len(self._buf) - self._pos
        if avail < n:
            blocks = [self._buf[self._pos:]]
            need = n - avail
            for _ in range((need + _LANES - 1) // _LANES):
                blocks.append(self._step())
            self._buf = np.concatenate(blocks)
            self._pos = 0
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def uniform(self, n: int | None = None, lo: float = 0.0, hi: float = 1.0):
        """Uniform doubles in [lo, hi); scalar when n is None."""
        m = 1 if n is None else n
        u = (self.u64(m) >> _U64(11)).astype(np.float64) * 2.0 ** -53
        out = lo + u * (hi - lo)
        return float(out[0]) if n is None else out

    def normal(self, n: int | None = None):
        """Standard Gaussians via Box-Muller; scalar when n is None."""
        m = 1 if n is None else n
        pairs = (m + 1) // 2
        u = (self.u64(2 * pairs) >> _U64(11)).astype(np.float64)
        u1 = (u[0::2] + 1.0) * 2.0 ** -53  # (0, 1]: keeps log finite
        u2 = u[1::2] * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return float(z[0]) if n is None else z[:m]

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Uniform integers in [lo, hi); scalar when n is None."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        u = self.uniform(1 if n is None else n)
        out = (np.floor(u * (hi - lo)) + lo).astype(np.int64)
        # floor(u * span) == span cannot occur for u < 1, but guard anyway
        out = np.minimum(out, hi - 1)
        return int(out[0]) if n is None else out

    def spawn(self, *tags: int | str) -> "Rng":
        """Independent child stream keyed by tags."""
        return Rng(derive_seed(self.seed, *tags))
