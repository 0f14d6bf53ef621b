"""Frozen-feature probes, label-fraction fine-tuning, and intra-class cosine aggregation.

Probes read the trunk features (the projection head is never consulted);
the kNN probe and the intra-class metric use the normalized embedding
space. Splits are class-stratified and fixed by the probe seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, canonicalize, backward_trunk, forward_features, forward_trunk
from .errors import NumericError, ValidationError
from .neighborhood import center_crop_square, embed_dataset
from .numerics import Rng


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.5
    lr_backbone: float = 0.005
    label_fraction: float = 1.0
    holdout: float = 0.2
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr <= 0 or self.lr_backbone < 0:
            raise ValidationError("probe lr must be positive and backbone lr non-negative")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValidationError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if not 0.0 < self.holdout < 1.0:
            raise ValidationError(f"holdout must lie in (0, 1), got {self.holdout}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")


def split_stratified(labels: np.ndarray, holdout: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified train/test split, deterministic under the rng."""
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.split("class", int(cls)).permutation(idx.size)]
        n_test = min(max(1, int(round(holdout * idx.size))), idx.size - 1) if idx.size > 1 else 0
        test.extend(perm[:n_test].tolist())
        train.extend(perm[n_test:].tolist())
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def _require_labels(dataset):
    if dataset.labels is None:
        raise ValidationError("labels required for this metric")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == labels).mean())


def train_softmax_head(features: np.ndarray, labels: np.ndarray, classes: int,
                       cfg: ProbeConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression with SGD momentum; returns (W, b)."""
    n, d = features.shape
    w = 0.01 * rng.normal_array((d, classes))
    b = np.zeros(classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0
    for _ in range(cfg.epochs):
        probs = _softmax(features @ w + b)
        g = (probs - onehot) / n
        gw = features.T @ g
        gb = g.sum(axis=0)
        vw = cfg.momentum * vw + gw
        vb = cfg.momentum * vb + gb
        w = w - cfg.lr * vw
        b = b - cfg.lr * vb
    return w, b


def probe_features(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    """Trunk features under deterministic center-crop preprocessing, unit rows."""
    feats = forward_features(params, center_crop_square(images)).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


def linear_probe_on(features: np.ndarray, labels: np.ndarray, classes: int,
                    cfg: ProbeConfig) -> float:
    """Train a linear softmax layer on a stratified split; held-out top-1."""
    rng = Rng(cfg.seed)
    train_idx, test_idx = split_stratified(labels, cfg.holdout, rng.split("split"))
    w, b = train_softmax_head(features[train_idx], labels[train_idx], classes,
                              cfg, rng.split("head"))
    return _accuracy(features[test_idx] @ w + b, labels[test_idx])


def linear_probe(params: EncoderParams, dataset, cfg: ProbeConfig) -> float:
    """Accuracy of a linear classifier on the frozen trunk features."""
    _require_labels(dataset)
    return linear_probe_on(probe_features(params, dataset.images), dataset.labels,
                           dataset.class_count, cfg)


def knn_accuracy_on(embeddings: np.ndarray, labels: np.ndarray, k: int,
                    holdout: float, seed: int) -> float:
    """Cosine kNN vote of held-out points against the train split."""
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    train_idx, test_idx = split_stratified(labels, holdout, Rng(seed).split("split"))
    k = min(k, train_idx.size)
    sims = embeddings[test_idx] @ embeddings[train_idx].T
    hits = 0
    for row, true in zip(sims, labels[test_idx]):
        order = np.lexsort((np.arange(row.size), -row))
        votes = labels[train_idx][order[:k]]
        counts = np.bincount(votes)
        hits += int(np.argmax(counts) == true)  # argmax ties -> lowest class id
    return hits / len(test_idx)


def knn_probe(params: EncoderParams, dataset, k: int, cfg: ProbeConfig) -> float:
    """kNN classification accuracy in the normalized embedding space."""
    _require_labels(dataset)
    emb = embed_dataset(params, dataset.images)
    return knn_accuracy_on(emb, dataset.labels, k, cfg.holdout, cfg.seed)


def finetune_fraction(params: EncoderParams, dataset, cfg: ProbeConfig) -> float:
    """Fine-tune all layers on a class-balanced label fraction; held-out top-1.

    Two learning-rate groups: lr for the fresh classifier head, lr_backbone
    for the pretrained stem and trunk.
    """
    _require_labels(dataset)
    rng = Rng(cfg.seed)
    train_idx, test_idx = split_stratified(dataset.labels, cfg.holdout, rng.split("split"))
    labels = dataset.labels
    subset = []
    for cls in np.unique(labels):
        members = train_idx[labels[train_idx] == cls]
        take = int(cfg.label_fraction * members.size)
        if take < 1:
            raise ValidationError(
                f"label fraction {cfg.label_fraction} yields no samples for class {int(cls)}")
        perm = members[rng.split("subset", int(cls)).permutation(members.size)]
        subset.extend(perm[:take].tolist())
    subset = np.asarray(sorted(subset), dtype=np.int64)

    model = params.astype(np.float64)
    classes = dataset.class_count
    head_w = 0.01 * rng.split("head").normal_array((model.dims.feat, classes))
    head_b = np.zeros(classes)
    x_train = canonicalize(center_crop_square(dataset.images[subset]), model.dims, dtype=np.float64)
    y_train = labels[subset]
    onehot = np.zeros((subset.size, classes))
    onehot[np.arange(subset.size), y_train] = 1.0
    velocity = {name: 0.0 for name in ("w1", "b1", "w2", "b2", "hw", "hb")}
    for _ in range(cfg.epochs):
        feats, acts = forward_trunk(model, x_train)
        probs = _softmax(feats @ head_w + head_b)
        g = (probs - onehot) / subset.size
        grad_hw = feats.T @ g
        grad_hb = g.sum(axis=0)
        grad_f = g @ head_w.T
        gw1, gb1, gw2, gb2 = backward_trunk(model, acts, grad_f)
        velocity["hw"] = cfg.momentum * velocity["hw"] + grad_hw
        velocity["hb"] = cfg.momentum * velocity["hb"] + grad_hb
        head_w = head_w - cfg.lr * velocity["hw"]
        head_b = head_b - cfg.lr * velocity["hb"]
        for name, grad in (("w1", gw1), ("b1", gb1), ("w2", gw2), ("b2", gb2)):
            velocity[name] = cfg.momentum * velocity[name] + grad
            setattr(model, name, getattr(model, name) - cfg.lr_backbone * velocity[name])
    x_test = canonicalize(center_crop_square(dataset.images[test_idx]), model.dims, dtype=np.float64)
    feats, _ = forward_trunk(model, x_test)
    return _accuracy(feats @ head_w + head_b, labels[test_idx])


def intra_class_similarity_of(embeddings: np.ndarray, labels: np.ndarray) -> tuple[dict[int, float], float]:
    """Mean pairwise cosine similarity inside each class; unweighted class mean.

    Classes with fewer than two members are skipped with a warning.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.maximum(norms, 1e-12)
    per_class: dict[int, float] = {}
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            warnings.warn(f"class {int(cls)} has fewer than 2 samples; skipped")
            continue
        total = emb[idx].sum(axis=0)
        n = idx.size
        per_class[int(cls)] = (float(total @ total) - n) / (n * (n - 1))
    if not per_class:
        raise ValidationError("no class has two or more samples")
    return per_class, float(np.mean(list(per_class.values())))


def intra_class_similarity(params: EncoderParams, dataset) -> tuple[dict[int, float], float]:
    """Intra-class similarity of the dataset under the given encoder."""
    _require_labels(dataset)
    emb = embed_dataset(params, dataset.images)
    return intra_class_similarity_of(emb, dataset.labels)
