"""Synthetic blob datasets, P6 raster ingestion, and the binary tensor container."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataFormatError, ValidationError
from .numerics import Rng

MAGIC = b"CLIMTNSR"
_VERSION = 1
_DTYPE_F32 = 0
_MAX_DIM = 2 ** 31


@dataclass(frozen=True)
class Dataset:
    """An immutable stack of same-shape images with optional class labels."""

    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: Optional[np.ndarray] = None  # (n,) int64
    class_count: Optional[int] = None

    def __post_init__(self):
        img = np.asarray(self.images, dtype=np.float32)
        if img.ndim != 4:
            raise ValidationError(f"images must be (n, H, W, C), got shape {img.shape}")
        if img.shape[3] not in (1, 3):
            raise ValidationError(f"channel count must be 1 or 3, got {img.shape[3]}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        img.setflags(write=False)
        object.__setattr__(self, "images", img)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (img.shape[0],):
                raise ValidationError(f"labels must be ({img.shape[0]},), got {lab.shape}")
            count = self.class_count if self.class_count is not None else (int(lab.max()) + 1 if lab.size else 0)
            if lab.size and (lab.min() < 0 or lab.max() >= count):
                raise ValidationError(f"labels must lie in [0, {count})")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
            object.__setattr__(self, "class_count", count)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[3]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a labeled Gaussian-blob dataset rendered to pixels."""

    class_count: int = 10
    per_class: int = 200
    latent_dim: int = 8
    image_side: int = 16
    channels: int = 3
    blob_stddev: float = 0.55
    seed: int = 1

    def __post_init__(self):
        if min(self.class_count, self.per_class, self.latent_dim, self.image_side) < 1:
            raise ValidationError("all synthetic counts must be positive")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if self.blob_stddev < 0:
            raise ValidationError(f"blob_stddev must be non-negative, got {self.blob_stddev}")


_RENDER_GAIN = 2.0


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sample per-class latent blobs and render them through a fixed random projection.

    Class means are standard normal in latent space; each sample adds
    blob_stddev-scaled noise and is mapped to pixels by one seeded linear
    projection shared across the whole dataset, then squashed by a sigmoid.
    """
    rng = Rng(spec.seed)
    pixels = spec.image_side * spec.image_side * spec.channels
    means = rng.split("class_means").normal_array((spec.class_count, spec.latent_dim))
    proj = rng.split("projection").normal_array((spec.latent_dim, pixels)) / np.sqrt(spec.latent_dim)
    noise = rng.split("latents").normal_array((spec.class_count * spec.per_class, spec.latent_dim))
    latents = np.repeat(means, spec.per_class, axis=0) + spec.blob_stddev * noise
    flat = 1.0 / (1.0 + np.exp(-_RENDER_GAIN * (latents @ proj)))
    images = flat.reshape(-1, spec.image_side, spec.image_side, spec.channels).astype(np.float32)
    labels = np.repeat(np.arange(spec.class_count, dtype=np.int64), spec.per_class)
    return Dataset(images=images, labels=labels, class_count=spec.class_count)


def save_tensor_file(ds: Dataset, path) -> None:
    """Write a dataset to the little-endian CLIMTNSR container."""
    n, h, w, c = ds.images.shape
    for dim in (n, h, w, c):
        if dim >= _MAX_DIM:
            raise DataFormatError("dim_overflow", f"dimension {dim} exceeds the format limit")
    has_labels = ds.labels is not None
    header = MAGIC + np.array([_VERSION], "<u4").tobytes()
    header += bytes([_DTYPE_F32, 1 if has_labels else 0])
    header += np.array([n, h, w, c], "<u4").tobytes()
    payload = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    tail = np.ascontiguousarray(ds.labels, dtype="<u4").tobytes() if has_labels else b""
    Path(path).write_bytes(header + payload + tail)


def load_tensor_file(path) -> Dataset:
    """Read a CLIMTNSR container back into a Dataset."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError("truncated", f"{path}: file shorter than the magic")
    if raw[:8] != MAGIC:
        raise DataFormatError("bad_magic", f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 30:
        raise DataFormatError("truncated", f"{path}: file shorter than the fixed header")
    version = int(np.frombuffer(raw, "<u4", 1, 8)[0])
    if version != _VERSION:
        raise DataFormatError("bad_version", f"{path}: unsupported version {version}")
    dtype_code, has_labels = raw[12], raw[13]
    if dtype_code != _DTYPE_F32:
        raise DataFormatError("bad_dtype", f"{path}: unknown dtype code {dtype_code}")
    n, h, w, c = (int(v) for v in np.frombuffer(raw, "<u4", 4, 14))
    if max(n, h, w, c) >= _MAX_DIM or n * h * w * c >= _MAX_DIM:
        raise DataFormatError("dim_overflow", f"{path}: dims ({n},{h},{w},{c}) exceed format limits")
    count = n * h * w * c
    offset = 30
    if len(raw) < offset + 4 * count:
        raise DataFormatError("truncated", f"{path}: pixel payload shorter than {count} floats")
    images = np.frombuffer(raw, "<f4", count, offset).reshape(n, h, w, c)
    labels = None
    if has_labels:
        if len(raw) < offset + 4 * count + 4 * n:
            raise DataFormatError("truncated", f"{path}: label payload shorter than {n} entries")
        labels = np.frombuffer(raw, "<u4", n, offset + 4 * count).astype(np.int64)
    return Dataset(images=images.copy(), labels=labels)


def _parse_ppm_tokens(raw: bytes, path) -> tuple[np.ndarray, int, int]:
    # Header: "P6" W H MAXVAL separated by whitespace/comments, then raw RGB.
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(raw):
            raise DataFormatError("truncated", f"{path}: header ended early")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise DataFormatError("bad_magic", f"{path}: not a binary P6 pixmap")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataFormatError("bad_header", f"{path}: non-numeric header fields") from None
    if width < 1 or height < 1:
        raise DataFormatError("bad_header", f"{path}: invalid size {width}x{height}")
    if not 0 < maxval < 256:
        raise DataFormatError("bad_header", f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    if len(raw) - pos < need:
        raise DataFormatError("truncated", f"{path}: pixel data shorter than {need} bytes")
    pixels = np.frombuffer(raw, np.uint8, need, pos).reshape(height, width, 3)
    return pixels.astype(np.float32) / maxval, height, width


def load_ppm_dir(path) -> Dataset:
    """Load every .ppm file in a directory, in lexicographic filename order.

    A `labels.txt` sidecar of "filename<TAB>class" lines attaches labels;
    without it the dataset is unlabeled.
    """
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"{path} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.suffix == ".ppm")
    if not names:
        raise ValidationError(f"{path} contains no .ppm files")
    images, shape = [], None
    for name in names:
        pixels, h, w = _parse_ppm_tokens((root / name).read_bytes(), root / name)
        if shape is None:
            shape = (h, w)
        elif shape != (h, w):
            raise DataFormatError("mixed_sizes", f"{name} is {h}x{w}, expected {shape[0]}x{shape[1]}")
        images.append(pixels)
    labels = None
    sidecar = root / "labels.txt"
    if sidecar.exists():
        table = {}
        for line in sidecar.read_text().splitlines():
            if not line.strip():
                continue
            try:
                fname, cls = line.split("\t")
                table[fname] = int(cls)
            except ValueError:
                raise DataFormatError("bad_labels", f"labels.txt line {line!r} is not filename<TAB>class") from None
        missing = [n for n in names if n not in table]
        if missing:
            raise DataFormatError("bad_labels", f"labels.txt has no entry for {missing[0]}")
        labels = np.asarray([table[n] for n in names], dtype=np.int64)
    return Dataset(images=np.stack(images), labels=labels)


def save_ppm(img: np.ndarray, path) -> None:
    """Write one [0,1] float image as a binary P6 file (grayscale replicated to RGB)."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValidationError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes())
