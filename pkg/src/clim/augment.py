"""View generation: crops, photometric jitter, blur, cutmix masks, multi-resolution rendering.

Every public single-image op delegates to a batch kernel with batch size 1,
so preview output and the trainer's batched rendering are bit-identical.
Pipeline order is fixed: crop -> flip -> color jitter -> grayscale -> blur
-> mixing. For multi-resolution mixing the mask geometry is snapped to the
gcd lattice of the resolution set, which maps to every grid with exactly
proportional integer coordinates; realized area fractions therefore agree
across resolutions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from ._kernels import bilinear_gather, jitter_gray, separable_blur
from .errors import ValidationError
from .numerics import Rng, sample_beta

_MIXINGS = ("cutmix", "mixup", "none")


@dataclass(frozen=True)
class AugConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_radius_range: tuple[float, float] = (0.1, 2.0)
    resolutions: tuple[int, ...] = (32, 24)
    alpha: float = 2.0
    mixing: str = "cutmix"
    mixup_alpha: float = 0.2

    def __post_init__(self):
        for name in ("flip_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        for name in ("crop_scale_range", "crop_aspect_range", "blur_radius_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValidationError(f"{name} must be an ordered positive range, got ({lo}, {hi})")
        if self.crop_scale_range[1] > 1.0:
            raise ValidationError("crop scale upper bound cannot exceed 1.0")
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        if not self.resolutions or min(self.resolutions) < 1:
            raise ValidationError("resolutions must be a non-empty list of positive ints")
        if len(set(self.resolutions)) != len(self.resolutions):
            raise ValidationError("resolutions must be distinct")
        if self.alpha <= 0 or self.mixup_alpha <= 0:
            raise ValidationError("beta parameters must be positive")
        if self.mixing not in _MIXINGS:
            raise ValidationError(f"mixing must be one of {_MIXINGS}, got {self.mixing!r}")


@dataclass(frozen=True)
class CropSpec:
    """A realized crop rectangle plus the output resolution it renders to."""

    top: int
    left: int
    height: int
    width: int
    out_side: int
    sigma: float
    aspect: float


@dataclass(frozen=True)
class MixMask:
    """Integer box on the output grid; lambda is the retained-anchor fraction."""

    x0: int
    y0: int
    x1: int
    y1: int
    side: int
    lambda_realized: float

    @property
    def area(self) -> int:
        return max(self.x1 - self.x0, 0) * max(self.y1 - self.y0, 0)


@dataclass(frozen=True)
class ViewParams:
    """Frozen stochastic parameters for one augmented view of one image."""

    top: int
    left: int
    height: int
    width: int
    flip: bool
    brightness: float
    contrast: float
    saturation: float
    grayscale: bool
    blur: bool
    blur_radius: float


@dataclass(frozen=True)
class MixParams:
    """Frozen parameters for a mixed multi-resolution view pair."""

    anchor_view: ViewParams
    positive_view: ViewParams
    lam_raw: float
    center_u: float
    center_v: float
    mixing: str


@dataclass
class MixedView:
    image: np.ndarray
    resolution: int
    lam: float
    mask: Optional[MixMask]
    crop: CropSpec
    anchor_index: int = -1
    positive_index: int = -1


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValidationError(f"{name} must be (H, W, 1|3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be non-empty")
    return arr


# ---------------------------------------------------------------------------
# geometry kernels


@lru_cache(maxsize=512)
def _axis_plan(src: int, out: int):
    # Half-pixel-center sampling positions of one axis, edge-clamped.
    pos = (np.arange(out, dtype=np.float64) + 0.5) * (src / out) - 0.5
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = np.clip(pos - i0, 0.0, 1.0)
    i0.setflags(write=False)
    i1.setflags(write=False)
    frac.setflags(write=False)
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize one (H, W, C) image with half-pixel-center bilinear sampling."""
    return resize_batch(_check_image(img)[None], out_h, out_w)[0]


def resize_batch(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (B, H, W, C) stack on a shared grid."""
    if stack.shape[1] == out_h and stack.shape[2] == out_w:
        return stack
    b = stack.shape[0]
    y0, y1, fy = _axis_plan(stack.shape[1], out_h)
    x0, x1, fx = _axis_plan(stack.shape[2], out_w)
    out = np.empty((b, out_h, out_w, stack.shape[3]), dtype=stack.dtype)
    bilinear_gather(np.ascontiguousarray(stack),
                    np.broadcast_to(y0, (b, out_h)), np.broadcast_to(y1, (b, out_h)),
                    np.broadcast_to(x0, (b, out_w)), np.broadcast_to(x1, (b, out_w)),
                    np.broadcast_to(fy.astype(stack.dtype), (b, out_h)),
                    np.broadcast_to(fx.astype(stack.dtype), (b, out_w)), out)
    return out


def _render_crop_batch(images: np.ndarray, rects, flips, out_side: int) -> np.ndarray:
    """Crop per-image rectangles from (B, H, W, C) and render at out_side.

    Rows are gathered and vertically interpolated first, then columns.
    Flips mirror the horizontal sample coordinates, which is bit-identical
    to flipping the rendered output.
    """
    b, src_h, src_w, c = images.shape
    grid = np.arange(out_side, dtype=np.float64) + 0.5
    tops = np.array([r[0] for r in rects], dtype=np.int64)
    lefts = np.array([r[1] for r in rects], dtype=np.int64)
    hs = np.array([r[2] for r in rects], dtype=np.int64)
    ws = np.array([r[3] for r in rects], dtype=np.int64)
    ys = grid[None, :] * (hs[:, None] / out_side) - 0.5
    xs = grid[None, :] * (ws[:, None] / out_side) - 0.5
    if any(flips):
        idx = np.asarray(flips, dtype=bool)
        xs[idx] = xs[idx, ::-1]
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, (hs - 1)[:, None])
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, (ws - 1)[:, None])
    y1 = np.minimum(y0 + 1, (hs - 1)[:, None])
    x1 = np.minimum(x0 + 1, (ws - 1)[:, None])
    fy = np.clip(ys - y0, 0.0, 1.0).astype(images.dtype)
    fx = np.clip(xs - x0, 0.0, 1.0).astype(images.dtype)
    out = np.empty((b, out_side, out_side, c), dtype=images.dtype)
    bilinear_gather(np.ascontiguousarray(images),
                    y0 + tops[:, None], y1 + tops[:, None],
                    x0 + lefts[:, None], x1 + lefts[:, None], fy, fx, out)
    return out


# ---------------------------------------------------------------------------
# photometric kernels

_LUMA = (0.299, 0.587, 0.114)


def _luma(views: np.ndarray) -> np.ndarray:
    return views[..., 0] * _LUMA[0] + views[..., 1] * _LUMA[1] + views[..., 2] * _LUMA[2]


def _jitter_batch(views: np.ndarray, factors: np.ndarray, gray=None) -> np.ndarray:
    # factors: (B, 3) brightness/contrast/saturation multipliers.
    gray_mask = np.zeros(views.shape[0], dtype=bool) if gray is None else np.asarray(gray, dtype=bool)
    out = np.empty_like(views)
    jitter_gray(np.ascontiguousarray(views), factors.astype(views.dtype), gray_mask, out)
    return out


def _grayscale_batch(views: np.ndarray, mask) -> np.ndarray:
    idx = np.asarray(mask, dtype=bool)
    if not idx.any():
        return views
    out = views.copy()
    out[idx] = _luma(views[idx])[..., None]
    return out


def _gauss_kernel(radius: float, dtype) -> np.ndarray:
    half = math.ceil(2.0 * radius)
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * radius * radius))
    return (k / k.sum()).astype(dtype)


def _blur_batch(views: np.ndarray, radii, mask) -> np.ndarray:
    apply_mask = np.asarray(mask, dtype=bool)
    if not apply_mask.any():
        return views
    b = views.shape[0]
    halves = np.zeros(b, dtype=np.int64)
    kernels = {}
    for i in np.flatnonzero(apply_mask):
        halves[i] = math.ceil(2.0 * radii[i])
        kernels[i] = _gauss_kernel(radii[i], views.dtype)
    bank = np.zeros((b, 2 * int(halves.max()) + 1), dtype=views.dtype)
    for i, taps in kernels.items():
        bank[i, : taps.size] = taps
    out = np.empty_like(views)
    separable_blur(np.ascontiguousarray(views), bank, halves, apply_mask, out)
    return out


def _apply_photometric_batch(views: np.ndarray, params: Sequence[ViewParams]) -> np.ndarray:
    if views.shape[3] == 3:
        factors = np.array([[p.brightness, p.contrast, p.saturation] for p in params])
        views = _jitter_batch(views, factors, gray=[p.grayscale for p in params])
    radii = [p.blur_radius for p in params]
    return _blur_batch(views, radii, [p.blur for p in params])


def render_view_batch(images: np.ndarray, params: Sequence[ViewParams], out_side: int) -> np.ndarray:
    """Render one augmented view per image at the requested resolution."""
    rects = [(p.top, p.left, p.height, p.width) for p in params]
    views = _render_crop_batch(images, rects, [p.flip for p in params], out_side)
    return _apply_photometric_batch(views, params)


# ---------------------------------------------------------------------------
# parameter draws

_CROP_ATTEMPTS = 10


def _draw_crop(rng: Rng, src_h: int, src_w: int, cfg: AugConfig) -> tuple[int, int, int, int]:
    log_lo = math.log(cfg.crop_aspect_range[0])
    log_hi = math.log(cfg.crop_aspect_range[1])
    for _ in range(_CROP_ATTEMPTS):
        sigma = rng.uniform(*cfg.crop_scale_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        area = sigma * src_h * src_w
        w = _round_half_up(math.sqrt(area * aspect))
        h = _round_half_up(math.sqrt(area / aspect))
        if 1 <= w <= src_w and 1 <= h <= src_h:
            top = rng.randint(0, src_h - h)
            left = rng.randint(0, src_w - w)
            return top, left, h, w
    side = min(src_h, src_w)
    return (src_h - side) // 2, (src_w - side) // 2, side, side


def draw_view_params(rng: Rng, src_hw: tuple[int, int], cfg: AugConfig) -> ViewParams:
    """Draw all stochastic parameters for one view (fixed consumption order)."""
    top, left, h, w = _draw_crop(rng, src_hw[0], src_hw[1], cfg)
    u = rng.random_array(7)  # flip, 3 jitter factors, gray, blur, radius
    flip = u[0] < cfg.flip_prob
    lo_b, lo_c, lo_s = (max(0.0, 1.0 - s) for s in (cfg.brightness, cfg.contrast, cfg.saturation))
    fb = lo_b + (1.0 + cfg.brightness - lo_b) * u[1]
    fc = lo_c + (1.0 + cfg.contrast - lo_c) * u[2]
    fs = lo_s + (1.0 + cfg.saturation - lo_s) * u[3]
    gray = u[4] < cfg.grayscale_prob
    blur = u[5] < cfg.blur_prob
    lo_r, hi_r = cfg.blur_radius_range
    radius = lo_r + (hi_r - lo_r) * u[6] if blur else 0.0
    return ViewParams(int(top), int(left), int(h), int(w), bool(flip),
                      float(fb), float(fc), float(fs), bool(gray), bool(blur), float(radius))


def _crop_spec(p: ViewParams, src_h: int, src_w: int, out_side: int) -> CropSpec:
    return CropSpec(
        top=p.top, left=p.left, height=p.height, width=p.width, out_side=out_side,
        sigma=(p.height * p.width) / (src_h * src_w), aspect=p.width / p.height,
    )


# ---------------------------------------------------------------------------
# public single-image operations


def random_resized_crop(rng: Rng, img: np.ndarray, cfg: AugConfig, out_side: Optional[int] = None):
    """Random area/aspect crop resized to a square; falls back to a center crop."""
    arr = _check_image(img)
    out_side = cfg.resolutions[0] if out_side is None else out_side
    top, left, h, w = _draw_crop(rng, arr.shape[0], arr.shape[1], cfg)
    rendered = _render_crop_batch(arr[None], [(top, left, h, w)], [False], out_side)[0]
    spec = _crop_spec(ViewParams(top, left, h, w, False, 1, 1, 1, False, False, 0.0),
                      arr.shape[0], arr.shape[1], out_side)
    return rendered, spec


def rerender(img: np.ndarray, spec: CropSpec, out_side: int) -> np.ndarray:
    """Render the identical source rectangle at another output resolution."""
    arr = _check_image(img)
    if spec.top < 0 or spec.left < 0 or spec.top + spec.height > arr.shape[0] or spec.left + spec.width > arr.shape[1]:
        raise ValidationError(f"crop spec {spec} exceeds image bounds {arr.shape[:2]}")
    if out_side < 1:
        raise ValidationError(f"out_side must be positive, got {out_side}")
    return _render_crop_batch(arr[None], [(spec.top, spec.left, spec.height, spec.width)], [False], out_side)[0]


def scale_factor(spec: CropSpec, src_h: int, src_w: int) -> float:
    """Effective magnification of a crop: (1/sigma) * out_side / sqrt(H*W)."""
    if spec.sigma <= 0:
        raise ValidationError("crop sigma must be positive")
    return (1.0 / spec.sigma) * spec.out_side / math.sqrt(src_h * src_w)


def horizontal_flip(rng: Rng, img: np.ndarray, prob: float) -> np.ndarray:
    arr = _check_image(img)
    if rng.random() < prob:
        return arr[:, ::-1].copy()
    return arr.copy()


def color_jitter(rng: Rng, img: np.ndarray, cfg: AugConfig) -> np.ndarray:
    """Brightness, contrast (blend with mean luma), saturation (blend with luma)."""
    arr = _check_image(img)
    if arr.shape[2] != 3:
        raise ValidationError(f"color jitter requires 3 channels, got {arr.shape[2]}")
    fb = rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
    fc = rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
    fs = rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
    return _jitter_batch(arr[None], np.array([[fb, fc, fs]]))[0]


def to_grayscale(rng: Rng, img: np.ndarray, prob: float) -> np.ndarray:
    arr = _check_image(img)
    if rng.random() < prob and arr.shape[2] == 3:
        return np.repeat(_luma(arr[None])[..., None], 3, axis=3)[0]
    return arr.copy()


def gaussian_blur(rng: Rng, img: np.ndarray, cfg: AugConfig) -> np.ndarray:
    arr = _check_image(img)
    if rng.random() < cfg.blur_prob:
        radius = rng.uniform(*cfg.blur_radius_range)
        return _blur_batch(arr[None], [radius], [True])[0]
    return arr.copy()


# ---------------------------------------------------------------------------
# mixing


def _box_from_center(side: int, box_side: int, cx: int, cy: int) -> tuple[int, int, int, int]:
    if box_side <= 0:
        return 0, 0, 0, 0
    x0 = max(cx - box_side // 2, 0)
    y0 = max(cy - box_side // 2, 0)
    x1 = min(cx - box_side // 2 + box_side, side)
    y1 = min(cy - box_side // 2 + box_side, side)
    if x1 <= x0 or y1 <= y0:
        return 0, 0, 0, 0
    return x0, y0, x1, y1


def cutmix_mask(rng: Rng, side: int, lam: float) -> MixMask:
    """Square box of side round(side*sqrt(1-lam)) at a uniform center, clipped."""
    if side < 1:
        raise ValidationError(f"side must be positive, got {side}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lam must lie in [0, 1], got {lam}")
    box_side = _round_half_up(side * math.sqrt(1.0 - lam))
    cx = rng.randint(0, side - 1)
    cy = rng.randint(0, side - 1)
    x0, y0, x1, y1 = _box_from_center(side, box_side, cx, cy)
    area = (x1 - x0) * (y1 - y0)
    return MixMask(x0, y0, x1, y1, side=side, lambda_realized=1.0 - area / (side * side))


def cutmix_apply(anchor: np.ndarray, positive: np.ndarray, mask: MixMask) -> np.ndarray:
    """Keep the anchor outside the box; paste the positive's patch inside it."""
    a = _check_image(anchor, "anchor")
    p = _check_image(positive, "positive")
    if a.shape != p.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {p.shape}")
    out = a.copy()
    out[mask.y0:mask.y1, mask.x0:mask.x1] = p[mask.y0:mask.y1, mask.x0:mask.x1]
    return out


def mixup_apply(anchor: np.ndarray, positive: np.ndarray, lam: float) -> np.ndarray:
    """Convex pixel blend; the mixing-method ablation alternative to cutmix."""
    a = _check_image(anchor, "anchor")
    p = _check_image(positive, "positive")
    if a.shape != p.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {p.shape}")
    lamt = np.asarray(lam, dtype=a.dtype)
    return lamt * a + (1 - lamt) * p


def draw_mix_params(rng: Rng, src_hw: tuple[int, int], cfg: AugConfig) -> MixParams:
    """Draw every stochastic input of make_views once, shared across resolutions."""
    pa = draw_view_params(rng.split("anchor_view"), src_hw, cfg)
    pp = draw_view_params(rng.split("positive_view"), src_hw, cfg)
    mix_rng = rng.split("mix")
    if cfg.mixing == "cutmix":
        lam = sample_beta(mix_rng, cfg.alpha)
        u, v = mix_rng.random(), mix_rng.random()
    elif cfg.mixing == "mixup":
        lam = sample_beta(mix_rng, cfg.mixup_alpha)
        u = v = 0.0
    else:
        lam, u, v = 1.0, 0.0, 0.0
    return MixParams(pa, pp, lam, u, v, cfg.mixing)


def _mask_lattice(resolutions: Sequence[int]) -> int:
    return math.gcd(*resolutions) if len(resolutions) > 1 else resolutions[0]


def realize_mixed_views_batch(anchors: np.ndarray, positives: np.ndarray,
                              params: Sequence[MixParams], cfg: AugConfig):
    """Render each anchor/positive pair at every configured resolution.

    Returns {resolution: (views, lams, masks)} where views is (B, r, r, C),
    lams the per-pair realized mixing weights, and masks per-pair MixMask
    (None entries for non-cutmix pairs).
    """
    lattice = _mask_lattice(cfg.resolutions)
    cell_boxes = []
    for p in params:
        if p.mixing == "cutmix":
            box_side = _round_half_up(lattice * math.sqrt(1.0 - p.lam_raw))
            cx = min(int(p.center_u * lattice), lattice - 1)
            cy = min(int(p.center_v * lattice), lattice - 1)
            cell_boxes.append(_box_from_center(lattice, box_side, cx, cy))
        else:
            cell_boxes.append(None)
    out = {}
    needs_positive = any(p.mixing != "none" for p in params)
    for r in cfg.resolutions:
        if r % lattice:
            raise ValidationError(f"resolution {r} is not a multiple of the mask lattice {lattice}")
        scale = r // lattice
        views = render_view_batch(anchors, [p.anchor_view for p in params], r)
        pos_views = render_view_batch(positives, [p.positive_view for p in params], r) if needs_positive else None
        lams = np.empty(len(params), dtype=np.float64)
        masks: list[Optional[MixMask]] = [None] * len(params)
        for i, p in enumerate(params):
            if p.mixing == "cutmix":
                x0, y0, x1, y1 = (edge * scale for edge in cell_boxes[i])
                area = (x1 - x0) * (y1 - y0)
                mask = MixMask(x0, y0, x1, y1, side=r, lambda_realized=1.0 - area / (r * r))
                views[i, y0:y1, x0:x1] = pos_views[i, y0:y1, x0:x1]
                masks[i] = mask
                lams[i] = mask.lambda_realized
            elif p.mixing == "mixup":
                lamt = np.asarray(p.lam_raw, dtype=views.dtype)
                views[i] = lamt * views[i] + (1 - lamt) * pos_views[i]
                lams[i] = p.lam_raw
            else:
                lams[i] = 1.0
        out[r] = (views, lams, masks)
    return out


def make_views(rng: Rng, anchor: np.ndarray, positive: np.ndarray, cfg: AugConfig,
               anchor_index: int = -1, positive_index: int = -1) -> list[MixedView]:
    """Build one mixed view per configured resolution from a positive pair.

    All stochastic parameters are drawn once, so the mixed content is
    geometrically identical across resolutions.
    """
    a = _check_image(anchor, "anchor")
    p = _check_image(positive, "positive")
    if a.shape != p.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {p.shape}")
    params = draw_mix_params(rng, (a.shape[0], a.shape[1]), cfg)
    rendered = realize_mixed_views_batch(a[None], p[None], [params], cfg)
    views = []
    for r in cfg.resolutions:
        stack, lams, masks = rendered[r]
        views.append(MixedView(
            image=stack[0], resolution=r, lam=float(lams[0]), mask=masks[0],
            crop=_crop_spec(params.anchor_view, a.shape[0], a.shape[1], r),
            anchor_index=anchor_index, positive_index=positive_index,
        ))
    return views
