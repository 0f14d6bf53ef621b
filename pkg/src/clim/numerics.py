"""Deterministic random generation and small vector kernels.

The generator is counter-based (splitmix64): drawing advances a 64-bit
counter by a fixed odd increment and hashes it, so scalar and vectorized
draws produce the same stream and identical seeds reproduce identical
sequences on any platform. Children derive from the parent's seed plus a
label, never from consumed state, so a split is insensitive to how many
draws happened before it.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ValidationError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_U64_GAMMA = np.uint64(_GAMMA)
_U64_MIX_A = np.uint64(_MIX_A)
_U64_MIX_B = np.uint64(_MIX_B)


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX_A
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX_B
    return z ^ (z >> np.uint64(31))


def _fold_label(h: int, label) -> int:
    if isinstance(label, (tuple, list)):
        for part in label:
            h = _fold_label(h, part)
        return h
    if isinstance(label, str):
        data = label.encode("utf-8")
    elif isinstance(label, (bool, int, np.integer)):
        data = (int(label) & _MASK64).to_bytes(8, "little")
    else:
        raise ValidationError(f"rng split labels must be str/int/tuple, got {type(label).__name__}")
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class Rng:
    """Seeded splitmix64 stream with labeled splitting."""

    __slots__ = ("_seed", "_state")

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._state = self._seed

    @property
    def seed(self) -> int:
        return self._seed

    def split(self, *labels) -> "Rng":
        """Derive an independent child stream from this seed and a label."""
        if not labels:
            raise ValidationError("rng split requires at least one label")
        h = _FNV_OFFSET
        for label in labels:
            h = _fold_label(h, label)
        return Rng(_mix64(self._seed ^ h))

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def next_u64_array(self, n: int) -> np.ndarray:
        counters = np.uint64(self._state) + _U64_GAMMA * np.arange(1, n + 1, dtype=np.uint64)
        self._state = (self._state + n * _GAMMA) & _MASK64
        return _mix64_array(counters)

    def random(self) -> float:
        """Uniform float64 in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def random_array(self, n: int) -> np.ndarray:
        return (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def uniform_array(self, n: int, lo: float, hi: float) -> np.ndarray:
        return lo + (hi - lo) * self.random_array(n)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if lo > hi:
            raise ValidationError(f"randint requires lo <= hi, got [{lo}, {hi}]")
        span = hi - lo + 1
        mask = (1 << span.bit_length()) - 1
        while True:
            r = self.next_u64() & mask
            if r < span:
                return lo + r

    def normal(self) -> float:
        """One standard normal draw (Box-Muller, two uniforms consumed)."""
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self.random_array(pairs)
        u2 = self.random_array(pairs)
        mag = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([mag * np.cos(2.0 * np.pi * u2), mag * np.sin(2.0 * np.pi * u2)])
        return out[:n].reshape(shape)

    def gamma(self, alpha: float) -> float:
        """Gamma(alpha, 1) via Marsaglia-Tsang squeeze with alpha<1 boosting."""
        if alpha <= 0:
            raise ValidationError(f"gamma shape must be positive, got {alpha}")
        if alpha < 1.0:
            u = self.random()
            while u <= 0.0:
                u = self.random()
            return self.gamma(alpha + 1.0) * u ** (1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.random()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def beta(self, alpha: float) -> float:
        """One draw from the symmetric Beta(alpha, alpha)."""
        a = self.gamma(alpha)
        b = self.gamma(alpha)
        return a / (a + b)

    def beta_array(self, n: int, alpha: float) -> np.ndarray:
        """Vectorized symmetric Beta draws (stream layout differs from the scalar loop)."""
        a = self._gamma_array(n, alpha)
        b = self._gamma_array(n, alpha)
        return a / (a + b)

    def _gamma_array(self, n: int, alpha: float) -> np.ndarray:
        if alpha <= 0:
            raise ValidationError(f"gamma shape must be positive, got {alpha}")
        boost = None
        if alpha < 1.0:
            u = self.random_array(n)
            u[u <= 0.0] = 0.5
            boost = u ** (1.0 / alpha)
            alpha = alpha + 1.0
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        out = np.empty(n, dtype=np.float64)
        pending = np.arange(n)
        while pending.size:
            m = pending.size
            x = self.normal_array(m)
            v = 1.0 + c * x
            u = self.random_array(m)
            v3 = v * v * v
            ok = v > 0.0
            squeeze = ok & (u < 1.0 - 0.0331 * x ** 4)
            with np.errstate(invalid="ignore", divide="ignore"):
                slow = ok & ~squeeze & (u > 0.0) & (np.log(u) < 0.5 * x * x + d * (1.0 - v3 + np.log(np.where(ok, v3, 1.0))))
            accept = squeeze | slow
            out[pending[accept]] = d * v3[accept]
            pending = pending[~accept]
        if boost is not None:
            out = out * boost
        return out

    def shuffle(self, values: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(values) - 1, 0, -1):
            j = self.randint(0, i)
            values[i], values[j] = values[j], values[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)

    def sample_without_replacement(self, values, k: int) -> list:
        pool = list(values)
        if k > len(pool):
            raise ValidationError(f"cannot sample {k} items from {len(pool)}")
        for i in range(k):
            j = self.randint(i, len(pool) - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def sample_beta(rng: Rng, alpha: float) -> float:
    """Symmetric Beta(alpha, alpha) draw in (0, 1)."""
    return rng.beta(alpha)


def sample_uniform_int(rng: Rng, lo: int, hi: int) -> int:
    """Uniform integer in the closed range [lo, hi]."""
    return rng.randint(lo, hi)


def _as_vector(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape[0] != vb.shape[0]:
        raise ValidationError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    return float(np.dot(va, vb))


def l2_normalize(a) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    va = _as_vector(a, "a")
    norm = math.sqrt(float(np.dot(va, va)))
    if norm <= 0.0:
        raise ValidationError("cannot normalize a zero vector")
    return va / norm


def l2_distance(a, b) -> float:
    """Euclidean distance between two equal-length vectors."""
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape[0] != vb.shape[0]:
        raise ValidationError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    diff = va - vb
    return math.sqrt(float(np.dot(diff, diff)))
