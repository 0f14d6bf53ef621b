"""Negative-key ring buffer and the InfoNCE loss family with analytic query gradients.

Keys are treated as constants (no gradient flows into the key encoder).
Per-query negative statistics are computed once and shared across every
positive pairing of that query, so the mixed and multi-resolution losses
decompose into cheap per-pair combinations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

_NORM_TOL = 1e-4


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    queue_capacity: int = 4096

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        if self.queue_capacity < 1:
            raise ValidationError(f"queue capacity must be positive, got {self.queue_capacity}")


def _check_unit(vec: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(vec)
    norm = float(np.sqrt((arr * arr).sum()))
    if abs(norm - 1.0) > _NORM_TOL:
        raise ValidationError(f"{name} must be unit-norm (|norm-1| <= {_NORM_TOL}), got norm {norm:.6f}")
    return arr


class NegativeQueue:
    """Fixed-capacity FIFO ring of unit-norm negative keys."""

    def __init__(self, capacity: int, dim: int, dtype=np.float64):
        if capacity < 1 or dim < 1:
            raise ValidationError(f"queue needs positive capacity and dim, got ({capacity}, {dim})")
        self.capacity = capacity
        self.dim = dim
        self._keys = np.zeros((capacity, dim), dtype=dtype)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def enqueue(self, keys) -> "NegativeQueue":
        arr = np.atleast_2d(np.asarray(keys, dtype=self._keys.dtype))
        if arr.size == 0:
            return self
        if arr.shape[1] != self.dim:
            raise ValidationError(f"key dim {arr.shape[1]} does not match queue dim {self.dim}")
        norms = np.sqrt((arr * arr).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > _NORM_TOL):
            raise ValidationError("queue keys must be unit-norm")
        for row in arr[-self.capacity:]:
            self._keys[self._head] = row
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        return self

    def as_array(self) -> np.ndarray:
        return self._keys[: self._size]


def enqueue(queue: NegativeQueue, keys) -> NegativeQueue:
    """FIFO append with eviction beyond capacity."""
    return queue.enqueue(keys)


@dataclass
class QueryStats:
    """Per-query negative-logit statistics reused across positive pairings."""

    q: np.ndarray
    tau: float
    neg_max: float
    neg_sumexp: float
    neg_wsum: np.ndarray  # exp-weighted sum of negative keys (unnormalized)


def query_stats(q: np.ndarray, negatives: np.ndarray, tau: float) -> QueryStats:
    if negatives.shape[0] == 0:
        raise ValidationError("negative queue is empty")
    l_neg = (negatives @ q) / tau
    neg_max = float(l_neg.max())
    w = np.exp(l_neg - neg_max)
    return QueryStats(q, tau, neg_max, float(w.sum()), w @ negatives)


def nce_with_stats(stats: QueryStats, k_pos: np.ndarray) -> tuple[float, np.ndarray]:
    l_pos = float(np.dot(stats.q, k_pos)) / stats.tau
    m = max(l_pos, stats.neg_max)
    z = math.exp(l_pos - m) + stats.neg_sumexp * math.exp(stats.neg_max - m)
    loss = m + math.log(z) - l_pos
    p_pos = math.exp(l_pos - m) / z
    scale = math.exp(stats.neg_max - m) / z
    grad_q = ((p_pos - 1.0) * k_pos + scale * stats.neg_wsum) / stats.tau
    return loss, grad_q


def nce_loss(q, k_pos, queue: NegativeQueue, tau: float) -> tuple[float, np.ndarray]:
    """InfoNCE of one query against its positive key and the queued negatives."""
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if len(queue) == 0:
        raise ValidationError("negative queue is empty")
    qv = _check_unit(q, "query")
    kv = _check_unit(k_pos, "positive key")
    stats = query_stats(qv, queue.as_array(), tau)
    return nce_with_stats(stats, kv)


def mixed_nce_loss(q_mix, k_anchor, k_pos, lam: float, queue: NegativeQueue,
                   tau: float) -> tuple[float, np.ndarray]:
    """Convex combination of two InfoNCE terms tying the mixed query to both sources."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lam must lie in [0, 1], got {lam}")
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if len(queue) == 0:
        raise ValidationError("negative queue is empty")
    qv = _check_unit(q_mix, "query")
    ka = _check_unit(k_anchor, "anchor key")
    kp = _check_unit(k_pos, "positive key")
    stats = query_stats(qv, queue.as_array(), tau)
    loss_a, grad_a = nce_with_stats(stats, ka)
    loss_p, grad_p = nce_with_stats(stats, kp)
    return lam * loss_a + (1.0 - lam) * loss_p, lam * grad_a + (1.0 - lam) * grad_p


def multi_res_loss(queries: Mapping[int, np.ndarray], keys: Mapping[int, tuple],
                   lam: float, queue: NegativeQueue, tau: float,
                   resolutions: Sequence[int]) -> tuple[float, dict[int, np.ndarray]]:
    """Sum of mixed losses over every ordered resolution pair (r, r').

    `queries[r]` is the mixed-view embedding rendered at r; `keys[r]` is the
    (anchor key, positive key) pair rendered at r. Gradients accumulate per
    query view.
    """
    resolutions = tuple(resolutions)
    if not resolutions:
        raise ValidationError("resolution set is empty")
    missing_q = [r for r in resolutions if r not in queries]
    missing_k = [r for r in resolutions if r not in keys]
    if missing_q or missing_k:
        raise ValidationError(f"missing per-resolution inputs: queries {missing_q}, keys {missing_k}")
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for r in resolutions:
        stats = None
        grad_r = np.zeros_like(np.asarray(queries[r]))
        for r_prime in resolutions:
            k_anchor, k_pos = keys[r_prime]
            if stats is None:
                if len(queue) == 0:
                    raise ValidationError("negative queue is empty")
                stats = query_stats(_check_unit(queries[r], f"query[{r}]"), queue.as_array(), tau)
            if not 0.0 <= lam <= 1.0:
                raise ValidationError(f"lam must lie in [0, 1], got {lam}")
            loss_a, grad_a = nce_with_stats(stats, _check_unit(k_anchor, f"anchor key[{r_prime}]"))
            loss_p, grad_p = nce_with_stats(stats, _check_unit(k_pos, f"positive key[{r_prime}]"))
            total += lam * loss_a + (1.0 - lam) * loss_p
            grad_r += lam * grad_a + (1.0 - lam) * grad_p
        grads[r] = grad_r
    return total, grads
