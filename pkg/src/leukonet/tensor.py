"""Array primitives and the deterministic random number generator.

Tensors are plain numpy arrays (float32 for storage, float64 for gradient
checks).  Image batches use N,H,W,C axis order, row-major.

The generator is xoshiro256** seeded through splitmix64.  Constants:

    splitmix64:  gamma  0x9E3779B97F4A7C15
                 mix1   0xBF58476D1CE4E5B9  (shift 30 before)
                 mix2   0x94D049BB133111EB  (shift 27 before, 31 after)
    xoshiro256**: out = rotl(s1 * 5, 7) * 9; t = s1 << 17;
                  s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t;
                  s3 = rotl(s3, 45)

Floats use the top 53 bits: u = (x >> 11) * 2**-53, so u lies in [0, 1).
Normals use Box-Muller on pairs of uniforms, both outputs consumed.
Bounded integers use the multiply-shift map (x * n) >> 64.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class ShapeError(ValueError):
    pass


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (last axis fastest)."""
    strides = []
    acc = 1
    for dim in reversed(shape):
        strides.append(acc)
        acc *= dim
    return tuple(reversed(strides))


def flat_index(shape: Sequence[int], coords: Sequence[int]) -> int:
    if len(coords) != len(shape):
        raise ShapeError(f"expected {len(shape)} coordinates, got {len(coords)}")
    for c, d in zip(coords, shape):
        if not 0 <= c < d:
            raise IndexError(f"coordinate {tuple(coords)} out of bounds for shape {tuple(shape)}")
    return sum(c * s for c, s in zip(coords, strides_of(shape)))


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(d) for d in new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def map_zip(a: np.ndarray, b, f: Callable) -> np.ndarray:
    """Elementwise f(a, b) where b is a scalar or an array of a's exact shape."""
    a = np.asarray(a)
    if np.ndim(b) == 0:
        return np.asarray(f(a, b), dtype=a.dtype)
    b = np.asarray(b)
    if b.shape != a.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.asarray(f(a, b), dtype=np.result_type(a, b))


_REDUCERS = {
    "sum": lambda t, ax: t.sum(axis=ax, dtype=np.float64),
    "mean": lambda t, ax: t.mean(axis=ax, dtype=np.float64),
    "max": lambda t, ax: t.max(axis=ax),
}


def reduce_axis(t: np.ndarray, axis: int, op: str = "sum") -> np.ndarray:
    if not 0 <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    try:
        reducer = _REDUCERS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    # accumulate in f64, store back in the input dtype
    return np.asarray(reducer(t, axis), dtype=t.dtype)


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + GOLDEN_GAMMA) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        x = s1 * np.uint64(5)
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = x * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3


def _as_shape(shape) -> tuple[int, ...]:
    return tuple(int(d) for d in np.atleast_1d(shape))


class Rng:
    """xoshiro256** generator; the same seed gives the same stream everywhere."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        x = self.seed & MASK64
        state = []
        for _ in range(4):
            x, z = splitmix64(x)
            state.append(z)
        self._s = np.array(state, dtype=np.uint64)

    @classmethod
    def derive(cls, seed: int, stream: int) -> "Rng":
        """Independent generator for (seed, stream), e.g. one per class."""
        _, a = splitmix64((seed & MASK64) ^ ((stream * GOLDEN_GAMMA) & MASK64))
        return cls(a)

    def getstate(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = (int(v) for v in self._s)
        out = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
        return out

    def u64_array(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self._s, out)
        return out

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        """Integer in [0, n)."""
        if n < 1:
            raise ValueError("bound must be positive")
        return (self.next_u64() * n) >> 64

    def _unit(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float, shape, dtype=np.float32) -> np.ndarray:
        """Samples in [lo, hi) of the given shape."""
        if not lo < hi:
            raise ValueError(f"invalid range: lo={lo} must be < hi={hi}")
        shape = _as_shape(shape)
        u = self._unit(math.prod(shape))
        out = (lo + (hi - lo) * u).astype(dtype)
        # rounding to a narrower dtype may land on hi
        top = np.nextafter(np.asarray(hi, dtype=dtype), np.asarray(lo, dtype=dtype))
        np.minimum(out, top, out=out)
        return out.reshape(shape)

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        shape = _as_shape(shape)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self._unit(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (z[:n] * std).astype(dtype).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)


def rng_uniform(r: Rng, lo: float, hi: float, shape) -> np.ndarray:
    return r.uniform(lo, hi, shape)


__all__ = [
    "Rng",
    "ShapeError",
    "flat_index",
    "map_zip",
    "reduce_axis",
    "reshape",
    "rng_uniform",
    "splitmix64",
    "strides_of",
]
