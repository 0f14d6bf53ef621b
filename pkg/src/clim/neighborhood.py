"""Embedding bank, k-means, exact kNN, and center-filtered positive selection.

Selection rule: intersect an anchor's k nearest neighbors with its cluster
peers, then keep members whose distance to the assigned center does not
exceed the anchor's. Ties break toward lower indices everywhere so every
query is deterministic. Distances are plain L2 on whatever vectors the
bank holds; the training pipeline stores unit-norm embeddings, where L2
ordering coincides with cosine ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import EncoderParams, forward
from .errors import NumericError, StaleModelError, ValidationError
from .numerics import Rng


@dataclass(frozen=True)
class NeighborhoodConfig:
    clusters: int | str = "auto"  # "auto" -> max(2, n // 128)
    k: int = 40
    positives: int = 10
    refresh_every: int = 5
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        if isinstance(self.clusters, str):
            if self.clusters != "auto":
                raise ValidationError(f"clusters must be an int or 'auto', got {self.clusters!r}")
        elif self.clusters < 1:
            raise ValidationError(f"clusters must be positive, got {self.clusters}")
        if self.k < 1 or self.positives < 1 or self.refresh_every < 1 or self.kmeans_iters < 1:
            raise ValidationError("k, positives, refresh_every, and kmeans_iters must be positive")
        if self.kmeans_tol < 0:
            raise ValidationError(f"kmeans_tol must be non-negative, got {self.kmeans_tol}")

    def resolve_clusters(self, n: int) -> int:
        return max(2, n // 128) if self.clusters == "auto" else int(self.clusters)


@dataclass
class EmbeddingBank:
    """One embedding row per dataset index, stamped with its refresh epoch."""

    vectors: np.ndarray
    epoch_stamp: int = 0

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"bank vectors must be (n, d), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("bank vectors contain non-finite values")
        self.vectors = arr

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    epoch_stamp: int = 0


@dataclass
class SelectionResult:
    anchor: int
    omega1: np.ndarray  # same-cluster peers (anchor excluded), ascending index
    omega2: np.ndarray  # k nearest neighbors, ascending distance
    omega2_dist: np.ndarray
    omega_p: np.ndarray  # center-filtered intersection, ascending index
    chosen: Optional[np.ndarray] = None


def _sq_dists_to(vectors: np.ndarray, point: np.ndarray) -> np.ndarray:
    diff = vectors - point
    return (diff * diff).sum(axis=1)


def _assign(vectors: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # (n, m) squared distances computed exactly as |x - c|^2; argmin takes
    # the lowest index on ties. Chunked to bound the broadcast buffer.
    n = vectors.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    chunk = max(1, 8_000_000 // max(1, centers.shape[0] * centers.shape[1]))
    for start in range(0, n, chunk):
        block = vectors[start:start + chunk]
        d2 = ((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        labels[start:start + chunk] = idx
        best[start:start + chunk] = d2[np.arange(len(block)), idx]
    return labels, best


def _seed_centers(rng: Rng, vectors: np.ndarray, m: int) -> np.ndarray:
    # k-means++: first center uniform, then squared-distance-weighted picks.
    n = vectors.shape[0]
    centers = np.empty((m, vectors.shape[1]), dtype=vectors.dtype)
    centers[0] = vectors[rng.randint(0, n - 1)]
    best = _sq_dists_to(vectors, centers[0])
    for j in range(1, m):
        total = float(best.sum())
        if total <= 0.0:
            centers[j] = vectors[int(np.argmin(best))]
            continue
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(best), u, side="right"))
        idx = min(idx, n - 1)
        centers[j] = vectors[idx]
        best = np.minimum(best, _sq_dists_to(vectors, centers[j]))
    return centers


def kmeans_fit(rng: Rng, bank: EmbeddingBank, m: int, max_iters: int = 100,
               tol: float = 1e-6) -> ClusterModel:
    """Lloyd iterations from a k-means++ seeding.

    Stops when the relative inertia improvement falls below tol or after
    max_iters sweeps. Empty clusters are re-seeded from the point farthest
    from its assigned center. Inertia is asserted non-increasing.
    """
    vectors = bank.vectors
    n = len(bank)
    if m < 1:
        raise ValidationError(f"cluster count must be positive, got {m}")
    if m > n:
        raise ValidationError(f"cannot fit {m} clusters to {n} points")
    centers = _seed_centers(rng, vectors, m)
    prev_inertia = math.inf
    labels, best = _assign(vectors, centers)
    for _ in range(max_iters):
        for j in range(m):
            members = labels == j
            if members.any():
                centers[j] = vectors[members].mean(axis=0)
            else:
                centers[j] = vectors[int(np.argmax(best))]
        labels, best = _assign(vectors, centers)
        inertia = float(best.sum())
        if inertia > prev_inertia * (1.0 + 1e-12) + 1e-12:
            raise NumericError(f"k-means inertia increased: {prev_inertia} -> {inertia}")
        improvement = prev_inertia - inertia
        if prev_inertia < math.inf and improvement <= tol * max(prev_inertia, 1e-300):
            prev_inertia = inertia
            break
        prev_inertia = inertia
    labels, best = _assign(vectors, centers)
    return ClusterModel(centers=centers, assignments=labels,
                        inertia=float(best.sum()), epoch_stamp=bank.epoch_stamp)


def knn_search(bank: EmbeddingBank, anchor: int, k: int) -> np.ndarray:
    """Exact k nearest neighbors by L2 distance, anchor excluded.

    Sorted ascending by distance; exact ties order by lower index.
    """
    n = len(bank)
    if not 0 <= anchor < n:
        raise ValidationError(f"anchor {anchor} out of range [0, {n})")
    if k < 1 or k >= n:
        raise ValidationError(f"k must lie in [1, {n - 1}], got {k}")
    d2 = _sq_dists_to(bank.vectors, bank.vectors[anchor])
    # preselect k+1 smallest plus every boundary tie, then order exactly
    kth = min(k + 1, n - 1)
    boundary = np.partition(d2, kth)[kth]
    candidates = np.flatnonzero(d2 <= boundary)
    order = candidates[np.lexsort((candidates, d2[candidates]))]
    order = order[order != anchor]
    return order[:k]


def select_positives(bank: EmbeddingBank, model: ClusterModel, anchor: int, k: int) -> SelectionResult:
    """Apply the center-wise rule: same cluster, within kNN, closer to the center."""
    if model.epoch_stamp != bank.epoch_stamp:
        raise StaleModelError(
            f"cluster model stamp {model.epoch_stamp} does not match bank stamp {bank.epoch_stamp}")
    n = len(bank)
    if not 0 <= anchor < n:
        raise ValidationError(f"anchor {anchor} out of range [0, {n})")
    cluster = int(model.assignments[anchor])
    omega1 = np.flatnonzero(model.assignments == cluster)
    omega1 = omega1[omega1 != anchor]
    omega2 = knn_search(bank, anchor, k)
    omega2_dist = np.sqrt(_sq_dists_to(bank.vectors[omega2], bank.vectors[anchor]))
    center = model.centers[cluster]
    d_anchor = float(np.sqrt(_sq_dists_to(bank.vectors[anchor][None], center)[0]))
    candidates = np.intersect1d(omega1, omega2)
    d_cand = np.sqrt(_sq_dists_to(bank.vectors[candidates], center))
    omega_p = candidates[d_cand <= d_anchor]
    return SelectionResult(anchor=anchor, omega1=omega1, omega2=omega2,
                           omega2_dist=omega2_dist, omega_p=omega_p)


def sample_positives(rng: Rng, sel: SelectionResult, count: int) -> np.ndarray:
    """Draw up to `count` positives, topping up from nearest neighbors.

    If the filtered set is large enough, sample it uniformly without
    replacement. Otherwise take all of it, then the nearest remaining
    neighbors in distance order, then (only if the neighbor list itself is
    too short) resample neighbors with replacement.
    """
    if count < 1:
        raise ValidationError(f"positive count must be positive, got {count}")
    if sel.omega2.size == 0:
        raise ValidationError("cannot sample positives: neighbor set is empty")
    pool = list(sel.omega_p)
    if len(pool) >= count:
        chosen = rng.sample_without_replacement(pool, count)
    else:
        chosen = list(pool)
        in_pool = set(pool)
        for idx in sel.omega2:  # already ascending by distance
            if len(chosen) >= count:
                break
            if int(idx) not in in_pool:
                chosen.append(int(idx))
        while len(chosen) < count:
            chosen.append(int(sel.omega2[rng.randint(0, sel.omega2.size - 1)]))
    result = np.asarray(chosen, dtype=np.int64)
    sel.chosen = result
    return result


def center_crop_square(images: np.ndarray) -> np.ndarray:
    """Deterministic central square crop of an image stack."""
    h, w = images.shape[1], images.shape[2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return images[:, top:top + side, left:left + side]


def embed_dataset(params: EncoderParams, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Embeddings under deterministic center-crop preprocessing, in dataset order."""
    cropped = center_crop_square(images)
    rows = []
    for start in range(0, cropped.shape[0], batch_size):
        emb, _ = forward(params, cropped[start:start + batch_size])
        rows.append(emb)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, params.dims.embed))


def refresh(bank: Optional[EmbeddingBank], model: Optional[ClusterModel],
            params: EncoderParams, images: np.ndarray, epoch: int,
            cfg: NeighborhoodConfig, rng: Rng) -> tuple[Optional[EmbeddingBank], Optional[ClusterModel]]:
    """Rebuild the bank and cluster model on refresh epochs; otherwise identity."""
    if epoch % cfg.refresh_every != 0:
        return bank, model
    vectors = embed_dataset(params, images)
    new_bank = EmbeddingBank(vectors=vectors, epoch_stamp=epoch)
    m = cfg.resolve_clusters(len(new_bank))
    new_model = kmeans_fit(rng.split("kmeans", epoch), new_bank, m,
                           max_iters=cfg.kmeans_iters, tol=cfg.kmeans_tol)
    return new_bank, new_model


_STRATEGY_POOLS = ("random", "knn", "kmeans", "knn_and_kmeans", "center_wise", "clim")


def build_positive_pools(strategy: str, bank: EmbeddingBank, model: ClusterModel,
                         cfg: NeighborhoodConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor candidate pools of cfg.positives entries for one refresh window.

    Returns (pools, omega_p_sizes); omega_p_sizes is zero for strategies
    that never evaluate the center-wise filter.
    """
    if strategy not in _STRATEGY_POOLS:
        raise ValidationError(f"no positive pool for strategy {strategy!r}")
    n = len(bank)
    count = cfg.positives
    pools = np.empty((n, count), dtype=np.int64)
    sizes = np.zeros(n, dtype=np.int64)
    for i in range(n):
        child = rng.split("pool", i)
        if strategy == "random":
            pools[i] = [_random_other(child, n, i) for _ in range(count)]
        elif strategy == "knn":
            pools[i] = _pad_to(knn_search(bank, i, min(count, n - 1)), count)
        elif strategy == "kmeans":
            peers = np.flatnonzero(model.assignments == model.assignments[i])
            peers = peers[peers != i]
            if peers.size:
                pools[i] = [int(peers[child.randint(0, peers.size - 1)]) for _ in range(count)]
            else:
                pools[i] = _pad_to(knn_search(bank, i, min(count, n - 1)), count)
        elif strategy == "knn_and_kmeans":
            sel = select_positives(bank, model, i, min(cfg.k, n - 1))
            inter = [int(x) for x in sel.omega2 if model.assignments[x] == model.assignments[i]]
            merged = inter + [int(x) for x in sel.omega2 if int(x) not in set(inter)]
            pools[i] = _pad_to(np.asarray(merged[:count], dtype=np.int64), count)
        else:  # center_wise / clim
            sel = select_positives(bank, model, i, min(cfg.k, n - 1))
            sizes[i] = sel.omega_p.size
            pools[i] = sample_positives(child, sel, count)
    return pools, sizes


def _random_other(rng: Rng, n: int, exclude: int) -> int:
    idx = rng.randint(0, n - 2)
    return idx if idx < exclude else idx + 1


def _pad_to(indices: np.ndarray, count: int) -> np.ndarray:
    if indices.size == 0:
        raise ValidationError("cannot build a positive pool from an empty candidate list")
    if indices.size >= count:
        return indices[:count]
    reps = int(np.ceil(count / indices.size))
    return np.tile(indices, reps)[:count]
