"""Pretraining loop: strategy-driven positives, mixed multi-resolution InfoNCE, SGD.

Every stochastic decision derives from labeled splits of one root seed
(per-step, per-anchor children), so replays are bit-identical for a given
config and dtype regardless of the worker count. Worker threads only
partition the per-anchor loss kernels; batched renders and the single
backward GEMM are shared and order-fixed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugConfig, draw_mix_params, draw_view_params, realize_mixed_views_batch, render_view_batch, resize_batch
from .contrastive import ContrastiveConfig, NegativeQueue
from .data import Dataset
from .encoder import EncoderDims, EncoderParams, KeyEncoder, ParamGrads, backward, forward, init_params, momentum_update, save_checkpoint
from .errors import NumericError, ValidationError
from .evaluate import intra_class_similarity_of
from .neighborhood import NeighborhoodConfig, build_positive_pools, center_crop_square, refresh
from .numerics import Rng

STRATEGIES = ("clim", "instance", "random", "knn", "kmeans", "knn_and_kmeans", "center_wise")
_KEY_VIEWS = ("augmented", "clean")
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr0: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    key_momentum: float = 0.99
    warmup_epochs_instance_only: Optional[int] = None  # None -> 20% of epochs
    strategy: str = "clim"
    mixing: str = "cutmix"
    key_view: str = "augmented"
    seed: int = 1
    dtype: str = "f32"
    workers: int = 1
    queue_warm_start: bool = True
    checkpoint_every: int = 0  # epochs between checkpoints; 0 writes final only
    hidden: int = 256
    feat: int = 128
    head_hidden: int = 128
    embed: int = 32
    canonical_side: Optional[int] = None  # None -> max(resolutions)
    aug: AugConfig = field(default_factory=AugConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    neighborhood: NeighborhoodConfig = field(default_factory=NeighborhoodConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mixing not in ("cutmix", "mixup", "none"):
            raise ValidationError(f"mixing must be cutmix/mixup/none, got {self.mixing!r}")
        if self.key_view not in _KEY_VIEWS:
            raise ValidationError(f"key_view must be one of {_KEY_VIEWS}, got {self.key_view!r}")
        if self.dtype not in _DTYPES:
            raise ValidationError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ValidationError("epochs must be >= 0; batch_size and workers must be positive")
        if min(self.lr0, self.key_momentum) < 0 or self.lr0 <= 0:
            raise ValidationError("lr0 must be positive and key_momentum non-negative")
        if not 0.0 <= self.sgd_momentum < 1.0 or self.weight_decay < 0:
            raise ValidationError("sgd_momentum must lie in [0, 1) and weight_decay be non-negative")
        if self.warmup_epochs_instance_only is not None and self.warmup_epochs_instance_only < 0:
            raise ValidationError("warmup epochs must be non-negative")

    def resolved_warmup(self) -> int:
        if self.warmup_epochs_instance_only is not None:
            return self.warmup_epochs_instance_only
        return int(round(0.2 * self.epochs))

    def resolved_canonical(self) -> int:
        return self.canonical_side if self.canonical_side else max(self.aug.resolutions)

    def numpy_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)  # (step, epoch, lr, loss, queue_size, mean_omega_p)
    epoch_stats: list = field(default_factory=list)  # (epoch, intra_class_similarity)

    def step_lines(self) -> list[str]:
        return [f"{s}\t{e}\t{lr:.10g}\t{loss:.10g}\t{q}\t{op:.10g}" for s, e, lr, loss, q, op in self.rows]

    def to_tsv(self) -> str:
        lines = self.step_lines()
        return "\n".join(lines) + ("\n" if lines else "")

    @property
    def losses(self) -> list[float]:
        return [row[3] for row in self.rows]


@dataclass
class TrainState:
    params: EncoderParams
    key: KeyEncoder
    queue: NegativeQueue
    velocity: ParamGrads
    rng: Rng
    images: np.ndarray
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    steps_per_epoch: int = 1
    bank: Optional[object] = None
    model: Optional[object] = None
    pools: Optional[np.ndarray] = None
    pool_sizes: Optional[np.ndarray] = None


def cosine_lr(lr0: float, epoch: float, total: float) -> float:
    """Half-cosine decay from lr0 at epoch 0 to zero at epoch `total`."""
    if not 0.0 <= epoch <= total:
        raise ValidationError(f"epoch {epoch} outside [0, {total}]")
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def _zero_grads(params: EncoderParams) -> ParamGrads:
    return ParamGrads(**{k: np.zeros_like(v) for k, v in params.tensors().items()})


def sgd_step(params: EncoderParams, grads: ParamGrads, velocity: ParamGrads, lr: float,
             momentum: float, weight_decay: float) -> tuple[EncoderParams, ParamGrads]:
    """v <- momentum*v + (g + wd*theta); theta <- theta - lr*v."""
    new_p, new_v = {}, {}
    pt, gt, vt = params.tensors(), grads.tensors(), velocity.tensors()
    for name in pt:
        if gt[name].shape != pt[name].shape or vt[name].shape != pt[name].shape:
            raise ValidationError(f"shape mismatch on {name}")
        v = momentum * vt[name] + (gt[name] + weight_decay * pt[name])
        new_v[name] = v
        new_p[name] = pt[name] - lr * v
    return EncoderParams(params.dims, **new_p), ParamGrads(**new_v)


def _clean_views(images: np.ndarray, resolutions) -> dict[int, np.ndarray]:
    square = center_crop_square(images)
    return {r: resize_batch(square, r, r) for r in resolutions}


def _chunks(n: int, workers: int):
    size = max(1, math.ceil(n / workers))
    return [range(start, min(start + size, n)) for start in range(0, n, size)]


def _render_chunked(images, params, out_side, workers):
    """render_view_batch split across worker threads; per-image results are
    independent, so any chunking reproduces the single-call output."""
    if workers <= 1 or images.shape[0] < 2 * workers:
        return render_view_batch(images, params, out_side)
    parts = _chunks(images.shape[0], workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rendered = list(pool.map(
            lambda part: render_view_batch(images[part.start:part.stop],
                                           params[part.start:part.stop], out_side),
            parts))
    return np.concatenate(rendered)


def _realize_chunked(anchors, positives, mix_params, aug_cfg, workers):
    if workers <= 1 or anchors.shape[0] < 2 * workers:
        return realize_mixed_views_batch(anchors, positives, mix_params, aug_cfg)
    parts = _chunks(anchors.shape[0], workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rendered = list(pool.map(
            lambda part: realize_mixed_views_batch(anchors[part.start:part.stop],
                                                   positives[part.start:part.stop],
                                                   mix_params[part.start:part.stop], aug_cfg),
            parts))
    out = {}
    for r in aug_cfg.resolutions:
        views = np.concatenate([chunk[r][0] for chunk in rendered])
        lams = np.concatenate([chunk[r][1] for chunk in rendered])
        masks = [m for chunk in rendered for m in chunk[r][2]]
        out[r] = (views, lams, masks)
    return out


def _batch_multi_res_loss(q_emb, k_a_emb, k_p_emb, lams, negatives, tau, res, b, use_mix):
    """Sum of mixed InfoNCE over ordered resolution pairs, batched over anchors.

    q_emb holds the query views resolution-major ((view of anchor i at
    res[ri]) at row ri*b+i). Returns per-anchor losses and the gradient
    rows aligned with q_emb. Same math as contrastive.multi_res_loss; this
    shape exists so one step costs two GEMMs instead of thousands of small
    kernels, and it never varies with the worker count.
    """
    dtype = q_emb.dtype
    logits = (q_emb @ negatives.T) / dtype.type(tau)
    neg_max = logits.max(axis=1)
    w = np.exp(logits - neg_max[:, None])
    neg_sumexp = w.sum(axis=1)
    neg_wsum = w @ negatives
    losses = np.zeros(b, dtype=np.float64)
    grad_stack = np.zeros_like(q_emb)
    if use_mix:
        legs = ((k_a_emb, lams.astype(dtype)), (k_p_emb, (1.0 - lams).astype(dtype)))
    else:
        legs = ((k_p_emb, np.ones(b, dtype=dtype)),)
    inv_tau = dtype.type(1.0 / tau)
    for ri, r in enumerate(res):
        rows = slice(ri * b, (ri + 1) * b)
        q = q_emb[rows]
        m_neg = neg_max[rows]
        sumexp = neg_sumexp[rows]
        wsum = neg_wsum[rows]
        for r_prime in res:
            for keys, weight in legs:
                k = keys[r_prime]
                l_pos = (q * k).sum(axis=1) * inv_tau
                m = np.maximum(l_pos, m_neg)
                e_pos = np.exp(l_pos - m)
                z = e_pos + sumexp * np.exp(m_neg - m)
                losses += weight * (m + np.log(z) - l_pos)
                p_pos = e_pos / z
                scale = np.exp(m_neg - m) / z
                grad_stack[rows] += (weight * inv_tau)[:, None] * (
                    (p_pos - 1.0)[:, None] * k + scale[:, None] * wsum)
    return losses, grad_stack


def train_step(state: TrainState, cfg: TrainConfig, batch: np.ndarray,
               aug_cfg: AugConfig) -> tuple[float, float]:
    """One optimizer step over a batch of anchor indices; returns (loss, lr)."""
    b = len(batch)
    res = aug_cfg.resolutions
    canonical = res[0]
    dtype = cfg.numpy_dtype()
    lr = cosine_lr(cfg.lr0, state.epoch + state.step_in_epoch / state.steps_per_epoch, cfg.epochs)
    src_hw = (state.images.shape[1], state.images.shape[2])
    instance_mode = state.pools is None

    positives = np.empty(b, dtype=np.int64)
    mix_params, key_a_params, key_p_params = [], [], []
    for i, a in enumerate(batch):
        child = state.rng.split("step", state.step, "anchor", int(a))
        if instance_mode:
            positives[i] = int(a)
        else:
            pool = state.pools[int(a)]
            positives[i] = int(pool[child.randint(0, pool.shape[0] - 1)])
        mix_params.append(draw_mix_params(child.split("query"), src_hw, aug_cfg))
        if cfg.key_view == "augmented":
            pa = draw_view_params(child.split("key_anchor"), src_hw, aug_cfg)
            key_a_params.append(pa)
            key_p_params.append(pa if positives[i] == int(a) else
                                draw_view_params(child.split("key_positive"), src_hw, aug_cfg))

    anchors_px = state.images[batch].astype(dtype)
    pos_px = anchors_px if instance_mode else state.images[positives].astype(dtype)
    mixed = _realize_chunked(anchors_px, pos_px, mix_params, aug_cfg, cfg.workers)
    lams = mixed[canonical][1]

    # key views: positive leg always feeds the loss; the anchor leg feeds the
    # loss when mixing and always supplies the canonical queue keys
    share_legs = instance_mode and cfg.key_view == "augmented"
    if cfg.key_view == "clean":
        key_p_views = _clean_views(pos_px, res)
        key_a_views = key_p_views if instance_mode else _clean_views(anchors_px, res)
    else:
        key_p_views = {r: _render_chunked(pos_px, key_p_params, r, cfg.workers) for r in res}
        if share_legs:
            key_a_views = key_p_views
        elif aug_cfg.mixing != "none":
            key_a_views = {r: _render_chunked(anchors_px, key_a_params, r, cfg.workers) for r in res}
        else:
            key_a_views = {canonical: _render_chunked(anchors_px, key_a_params, canonical, cfg.workers)}

    side = state.params.dims.in_side
    q_emb, acts = forward(state.params, np.concatenate([resize_batch(mixed[r][0], side, side) for r in res]))
    k_p_emb = {r: forward(state.key.params, key_p_views[r])[0] for r in res}
    if key_a_views is key_p_views:
        k_a_emb = k_p_emb
    else:
        k_a_emb = {r: forward(state.key.params, views)[0] for r, views in key_a_views.items()}
    queue_keys = k_a_emb[canonical] if canonical in k_a_emb else k_p_emb[canonical]

    use_mix = aug_cfg.mixing != "none"

    # cold-start escape hatch: an empty queue cannot serve negatives, so the
    # very first batch contributes its own keys before the loss instead of after
    enqueue_after = True
    if len(state.queue) == 0:
        state.queue.enqueue(queue_keys)
        enqueue_after = False

    losses, grad_stack = _batch_multi_res_loss(
        q_emb, k_a_emb, k_p_emb, lams, state.queue.as_array(),
        cfg.contrastive.tau, res, b, use_mix)

    batch_loss = float(np.sum(losses)) / b
    if not math.isfinite(batch_loss):
        bad = int(np.flatnonzero(~np.isfinite(losses))[0])
        raise NumericError(
            f"non-finite loss at step {state.step} (anchor {int(batch[bad])}, epoch {state.epoch})")

    grads = backward(state.params, acts, (grad_stack / b).astype(dtype))
    state.params, state.velocity = sgd_step(state.params, grads, state.velocity, lr,
                                            cfg.sgd_momentum, cfg.weight_decay)
    state.key = momentum_update(state.key, state.params)
    if enqueue_after:
        state.queue.enqueue(queue_keys)
    return batch_loss, lr


def _warm_fill(queue: NegativeQueue, key: KeyEncoder, images: np.ndarray,
               aug_cfg: AugConfig, rng: Rng, dtype) -> None:
    # Pre-fill with key embeddings of randomly augmented samples so the
    # first step's negative statistics match steady state (chance-level
    # loss ~ ln(K+1) from the start).
    n = images.shape[0]
    src_hw = (images.shape[1], images.shape[2])
    filled = 0
    while filled < queue.capacity:
        take = min(256, queue.capacity - filled)
        idxs = np.array([rng.randint(0, n - 1) for _ in range(take)])
        params = [draw_view_params(rng.split("view", filled + j), src_hw, aug_cfg) for j in range(take)]
        views = render_view_batch(images[idxs].astype(dtype), params, aug_cfg.resolutions[0])
        emb, _ = forward(key.params, views)
        queue.enqueue(emb)
        filled += take


def pretrain(dataset: Dataset, cfg: TrainConfig, out_dir=None) -> tuple[EncoderParams, MetricsLog]:
    """Run the full pretraining schedule; returns final query params and the log.

    Warmup epochs use instance positives (the neighborhood machinery needs a
    trained encoder first); afterwards the configured strategy rebuilds its
    positive pools on every refresh. Checkpoints land in out_dir when given.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot pretrain on an empty dataset")
    aug_cfg = replace(cfg.aug, mixing=cfg.mixing)
    dtype = cfg.numpy_dtype()
    dims = EncoderDims(in_side=cfg.resolved_canonical(), channels=dataset.channels,
                       hidden=cfg.hidden, feat=cfg.feat, head_hidden=cfg.head_hidden,
                       embed=cfg.embed)
    rng = Rng(cfg.seed)
    params = init_params(rng.split("init"), dims, dtype=dtype)
    key = KeyEncoder(params.copy(), cfg.key_momentum)
    queue = NegativeQueue(cfg.contrastive.queue_capacity, cfg.embed, dtype=dtype)
    state = TrainState(params=params, key=key, queue=queue, velocity=_zero_grads(params),
                       rng=rng, images=dataset.images)
    log = MetricsLog()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if cfg.epochs > 0 and cfg.queue_warm_start:
        _warm_fill(queue, key, dataset.images, aug_cfg, rng.split("queue_init"), dtype)

    n = len(dataset)
    warmup = cfg.resolved_warmup()
    state.steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    needs_pools = cfg.strategy != "instance"

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        if needs_pools and epoch >= warmup:
            new_bank, new_model = refresh(state.bank, state.model, state.key.params,
                                          dataset.images, epoch - warmup, cfg.neighborhood,
                                          rng.split("refresh"))
            if new_bank is not state.bank:
                state.bank, state.model = new_bank, new_model
                state.pools, state.pool_sizes = build_positive_pools(
                    cfg.strategy, state.bank, state.model, cfg.neighborhood,
                    rng.split("pools", epoch))
                if dataset.labels is not None:
                    _, mean_sim = intra_class_similarity_of(state.bank.vectors, dataset.labels)
                    log.epoch_stats.append((epoch, mean_sim))
        order = rng.split("order", epoch).permutation(n)
        state.step_in_epoch = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, lr = train_step(state, cfg, batch, aug_cfg)
            if state.pool_sizes is not None and state.pools is not None:
                mean_omega = float(state.pool_sizes[batch].mean())
            else:
                mean_omega = 0.0
            log.rows.append((state.step, epoch, lr, loss, len(state.queue), mean_omega))
            state.step += 1
            state.step_in_epoch += 1
        if out_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
            save_checkpoint(out_path / f"ckpt_epoch{epoch + 1}.clim", state.params, state.key.params,
                            extra={"epoch": epoch + 1, "seed": cfg.seed})

    if out_path is not None:
        save_checkpoint(out_path / f"ckpt_epoch{cfg.epochs}.clim", state.params, state.key.params,
                        extra={"epoch": cfg.epochs, "seed": cfg.seed})
    return state.params, log
