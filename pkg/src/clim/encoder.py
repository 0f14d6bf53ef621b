"""Flattened-pixel MLP encoder with hand-written backprop and a momentum key twin.

Layers: stem (pixels -> hidden, ReLU), trunk (hidden -> feat, ReLU), then a
2-layer projection head (feat -> head_hidden, ReLU, -> embed) whose output
is L2-normalized. Views of any resolution are bilinearly resized to the
stem's canonical square before flattening. Evaluation consumes the trunk
features; the head exists only for the contrastive objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import resize_batch
from .errors import DataFormatError, NumericError, ValidationError
from .numerics import Rng

_CKPT_MAGIC = b"CLIMCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderDims:
    in_side: int = 32
    channels: int = 3
    hidden: int = 256
    feat: int = 128
    head_hidden: int = 128
    embed: int = 32

    def __post_init__(self):
        if min(self.in_side, self.hidden, self.feat, self.head_hidden, self.embed) < 1:
            raise ValidationError("all encoder dims must be positive")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def in_dim(self) -> int:
        return self.in_side * self.in_side * self.channels


_TENSOR_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")


@dataclass
class EncoderParams:
    dims: EncoderDims
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}

    @property
    def dtype(self):
        return self.w1.dtype

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, **{k: v.copy() for k, v in self.tensors().items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.dims, **{k: v.astype(dtype) for k, v in self.tensors().items()})


@dataclass
class ParamGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}


@dataclass
class Activations:
    """Forward-pass cache for one batch; tied to the params that produced it."""

    x: np.ndarray
    h1: np.ndarray
    f: np.ndarray
    h3: np.ndarray
    z: np.ndarray
    norms: np.ndarray
    emb: np.ndarray
    params_token: int


@dataclass
class KeyEncoder:
    params: EncoderParams
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"key momentum must lie in [0, 1), got {self.momentum}")


def init_params(rng: Rng, dims: EncoderDims, dtype=np.float32) -> EncoderParams:
    """Fan-in-scaled uniform init (+-sqrt(6/fan_in)); biases start at zero."""
    shapes = {
        "w1": (dims.in_dim, dims.hidden), "b1": (dims.hidden,),
        "w2": (dims.hidden, dims.feat), "b2": (dims.feat,),
        "w3": (dims.feat, dims.head_hidden), "b3": (dims.head_hidden,),
        "w4": (dims.head_hidden, dims.embed), "b4": (dims.embed,),
    }
    tensors = {}
    for name, shape in shapes.items():
        if name.startswith("b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / shape[0])
            flat = rng.uniform_array(int(np.prod(shape)), -bound, bound)
            tensors[name] = flat.reshape(shape).astype(dtype)
    return EncoderParams(dims, **tensors)


def canonicalize(images, dims: EncoderDims, dtype=None) -> np.ndarray:
    """Resize views to the canonical stem square, center to [-1, 1], flatten.

    Centering keeps the stem's pre-activations zero-mean; feeding raw [0, 1]
    pixels through ReLU layers collapses every embedding into a narrow cone
    and starves the contrastive gradient. Accepts one (n, H, W, C) stack or
    a list of (H, W, C) images of mixed resolutions (resized per shape
    group).
    """
    dtype = dtype or (images.dtype if isinstance(images, np.ndarray) else np.asarray(images[0]).dtype)
    side = dims.in_side
    if isinstance(images, np.ndarray):
        if images.ndim != 4:
            raise ValidationError(f"expected (n, H, W, C), got shape {images.shape}")
        if images.shape[3] != dims.channels:
            raise ValidationError(f"expected {dims.channels} channels, got {images.shape[3]}")
        stack = resize_batch(images.astype(dtype, copy=False), side, side)
        flat = np.ascontiguousarray(stack.reshape(stack.shape[0], -1))
        return 2.0 * flat - 1.0
    out = np.empty((len(images), dims.in_dim), dtype=dtype)
    groups: dict[tuple, list[int]] = {}
    for i, img in enumerate(images):
        arr = np.asarray(img)
        if arr.ndim != 3 or arr.shape[2] != dims.channels:
            raise ValidationError(f"image {i} has shape {arr.shape}, expected (H, W, {dims.channels})")
        groups.setdefault(arr.shape[:2], []).append(i)
    for shape, idxs in groups.items():
        stack = np.stack([np.asarray(images[i], dtype=dtype) for i in idxs])
        resized = resize_batch(stack, side, side)
        out[np.asarray(idxs)] = resized.reshape(len(idxs), -1)
    return 2.0 * out - 1.0


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def forward(params: EncoderParams, images) -> tuple[np.ndarray, Activations]:
    """Embed a batch of images; returns unit-norm embeddings and the backprop cache."""
    x = canonicalize(images, params.dims, dtype=params.dtype)
    h1 = _relu(x @ params.w1 + params.b1)
    f = _relu(h1 @ params.w2 + params.b2)
    h3 = _relu(f @ params.w3 + params.b3)
    z = h3 @ params.w4 + params.b4
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        raise NumericError("degenerate embedding: pre-normalization output has zero norm")
    emb = z / norms
    if not np.all(np.isfinite(emb)):
        raise NumericError("non-finite embedding")
    return emb, Activations(x, h1, f, h3, z, norms, emb, id(params))


def forward_features(params: EncoderParams, images) -> np.ndarray:
    """Trunk output (pre-head features) used by every evaluation protocol."""
    x = canonicalize(images, params.dims, dtype=params.dtype)
    h1 = _relu(x @ params.w1 + params.b1)
    return _relu(h1 @ params.w2 + params.b2)


def backward(params: EncoderParams, acts: Activations, grad_emb: np.ndarray) -> ParamGrads:
    """Exact parameter gradients, including the L2-normalization Jacobian."""
    if acts.params_token != id(params):
        raise ValidationError("stale activation cache: produced by different params")
    if grad_emb.shape != acts.emb.shape:
        raise ValidationError(f"grad shape {grad_emb.shape} does not match embeddings {acts.emb.shape}")
    # d/dz of z/|z|: (g - emb (emb.g)) / |z|
    inner = (acts.emb * grad_emb).sum(axis=1, keepdims=True)
    dz = (grad_emb - acts.emb * inner) / acts.norms
    gw4 = acts.h3.T @ dz
    gb4 = dz.sum(axis=0)
    dh3 = (dz @ params.w4.T) * (acts.h3 > 0)
    gw3 = acts.f.T @ dh3
    gb3 = dh3.sum(axis=0)
    df = (dh3 @ params.w3.T) * (acts.f > 0)
    gw2 = acts.h1.T @ df
    gb2 = df.sum(axis=0)
    dh1 = (df @ params.w2.T) * (acts.h1 > 0)
    gw1 = acts.x.T @ dh1
    gb1 = dh1.sum(axis=0)
    return ParamGrads(gw1, gb1, gw2, gb2, gw3, gb3, gw4, gb4)


@dataclass
class TrunkActs:
    x: np.ndarray
    h1: np.ndarray
    f: np.ndarray
    params_token: int


def forward_trunk(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, TrunkActs]:
    """Stem+trunk forward on pre-flattened inputs (fine-tuning path)."""
    h1 = _relu(x @ params.w1 + params.b1)
    f = _relu(h1 @ params.w2 + params.b2)
    return f, TrunkActs(x, h1, f, id(params))


def backward_trunk(params: EncoderParams, acts: TrunkActs, grad_f: np.ndarray):
    """Gradients of stem+trunk weights given the feature-level gradient."""
    if acts.params_token != id(params):
        raise ValidationError("stale activation cache: produced by different params")
    df = grad_f * (acts.f > 0)
    gw2 = acts.h1.T @ df
    gb2 = df.sum(axis=0)
    dh1 = (df @ params.w2.T) * (acts.h1 > 0)
    gw1 = acts.x.T @ dh1
    gb1 = dh1.sum(axis=0)
    return gw1, gb1, gw2, gb2


def momentum_update(key: KeyEncoder, query: EncoderParams) -> KeyEncoder:
    """Exponential tracking of the query weights: k <- m*k + (1-m)*q."""
    kt, qt = key.params.tensors(), query.tensors()
    for name in _TENSOR_FIELDS:
        if kt[name].shape != qt[name].shape:
            raise ValidationError(f"shape mismatch on {name}: {kt[name].shape} vs {qt[name].shape}")
    m = key.momentum
    merged = {name: m * kt[name] + (1.0 - m) * qt[name] for name in _TENSOR_FIELDS}
    return KeyEncoder(EncoderParams(key.params.dims, **merged), key.momentum)


def save_checkpoint(path, query: EncoderParams, key: EncoderParams, extra: Optional[dict] = None) -> None:
    """Write both encoders as named f32 blocks behind a JSON index."""
    blocks, payload, offset = [], [], 0
    for prefix, params in (("q", query), ("k", key)):
        for name, tensor in params.tensors().items():
            raw = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
            blocks.append({"name": f"{prefix}.{name}", "shape": list(tensor.shape),
                           "offset": offset, "count": int(tensor.size)})
            payload.append(raw)
            offset += len(raw)
    dims = query.dims
    index = {
        "dims": {f.name: getattr(dims, f.name) for f in fields(dims)},
        "extra": extra or {},
        "blocks": blocks,
    }
    index_raw = json.dumps(index, sort_keys=True).encode("utf-8")
    head = _CKPT_MAGIC + np.array([_CKPT_VERSION, len(index_raw)], "<u4").tobytes()
    Path(path).write_bytes(head + index_raw + b"".join(payload))


def load_checkpoint(path) -> tuple[EncoderParams, EncoderParams, dict]:
    """Read a checkpoint back; returns (query, key, extra)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != _CKPT_MAGIC:
        raise DataFormatError("bad_magic", f"{path}: not a checkpoint file")
    version, index_len = (int(v) for v in np.frombuffer(raw, "<u4", 2, 8))
    if version != _CKPT_VERSION:
        raise DataFormatError("bad_version", f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + index_len:
        raise DataFormatError("truncated", f"{path}: index shorter than declared")
    index = json.loads(raw[16:16 + index_len].decode("utf-8"))
    dims = EncoderDims(**index["dims"])
    base = 16 + index_len
    tensors: dict[str, np.ndarray] = {}
    for block in index["blocks"]:
        start = base + block["offset"]
        end = start + 4 * block["count"]
        if len(raw) < end:
            raise DataFormatError("truncated", f"{path}: block {block['name']} exceeds file size")
        tensors[block["name"]] = np.frombuffer(raw[start:end], "<f4").reshape(block["shape"]).copy()
    try:
        query = EncoderParams(dims, **{n: tensors[f"q.{n}"] for n in _TENSOR_FIELDS})
        key = EncoderParams(dims, **{n: tensors[f"k.{n}"] for n in _TENSOR_FIELDS})
    except KeyError as missing:
        raise DataFormatError("truncated", f"{path}: missing block {missing}") from None
    return query, key, index.get("extra", {})
