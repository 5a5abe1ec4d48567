"""Strong and weak image transformations producing the three training views.

Images are ``(H, W, C)`` uint8 arrays. Every random transform takes an explicit
``numpy.random.Generator``; :func:`view_rng` derives an independent stream per
(data seed, training seed, epoch, sample, view) so the views of a sample never
depend on batch composition or evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TransformParams:
    is_strong: bool = True
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    flip_prob: float = 0.5
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    fixed_jitter_order: bool = False

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ParameterError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must be in [0, 1]")
        if any(s < 0 for s in self.jitter_strengths):
            raise ParameterError("jitter strengths must be non-negative")

    @classmethod
    def strong(cls, **overrides) -> "TransformParams":
        return cls(is_strong=True, **overrides)

    @classmethod
    def weak(cls, **overrides) -> "TransformParams":
        return cls(is_strong=False, **overrides)


def view_rng(data_seed: int, train_seed: int, epoch: int, index: int, view: int) -> np.random.Generator:
    return np.random.default_rng([data_seed, train_seed, epoch, index, view])


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# -- geometry ----------------------------------------------------------------------

def _taps(start: np.ndarray, size: np.ndarray, out: int):
    """Half-pixel-centered bilinear source taps, one row per sample."""
    src = (np.arange(out)[None, :] + 0.5) * (size[:, None] / out) - 0.5
    src = np.clip(src, 0, (size - 1)[:, None])
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, (size - 1)[:, None])
    return start[:, None] + i0, start[:, None] + i1, src - i0


def _resize_windows(images: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Resample window ``(top, left, h, w)`` of each image back to full size (float output)."""
    b, out_h, out_w, _ = images.shape
    y0, y1, fy = _taps(boxes[:, 0], boxes[:, 2], out_h)
    x0, x1, fx = _taps(boxes[:, 1], boxes[:, 3], out_w)
    im = images.astype(np.float64)
    n = np.arange(b)[:, None, None]
    fy = fy[:, :, None, None]
    fx = fx[:, None, :, None]
    y0, y1 = y0[:, :, None], y1[:, :, None]
    x0, x1 = x0[:, None, :], x1[:, None, :]
    top = im[n, y0, x0] * (1 - fx) + im[n, y0, x1] * fx
    bottom = im[n, y1, x0] * (1 - fx) + im[n, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def resized_crop_box(height: int, width: int, scale_range: tuple[float, float], rng: np.random.Generator,
                     ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Sample ``(top, left, h, w)``: area fraction uniform in ``scale_range``, log-uniform aspect."""
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*scale_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # center crop fallback, clamping the aspect ratio into range
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        h, w = height, width
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(img: np.ndarray, scale_range: tuple[float, float], rng: np.random.Generator,
                        ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random area fraction / aspect ratio and resize back to the input size."""
    box = resized_crop_box(img.shape[0], img.shape[1], scale_range, rng, ratio)
    return _to_uint8(_resize_windows(img[None], np.array([box]))[0])


def horizontal_flip(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < p:
        return img[:, ::-1].copy()
    return img


# -- color -----------------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 1] to HSV with hue as a fraction of a full cycle."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0:1], hsv[..., 1:2], hsv[..., 2:3]
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _gray(x: np.ndarray) -> np.ndarray:
    return x[..., 0] * LUMA[0] + x[..., 1] * LUMA[1] + x[..., 2] * LUMA[2]


# The adjust_* functions take float images (..., H, W, 3) in [0, 255] and a
# factor that is either a scalar or one value per leading batch entry.

def _per_image(factor, x: np.ndarray) -> np.ndarray:
    f = np.asarray(factor, dtype=np.float64)
    return f.reshape(f.shape + (1,) * (x.ndim - f.ndim))


def adjust_brightness(x: np.ndarray, factor) -> np.ndarray:
    return np.clip(x * _per_image(factor, x), 0.0, 255.0)


def adjust_contrast(x: np.ndarray, factor) -> np.ndarray:
    m = _gray(x).mean(axis=(-2, -1))[..., None, None, None]
    return np.clip((x - m) * _per_image(factor, x) + m, 0.0, 255.0)


def adjust_saturation(x: np.ndarray, factor) -> np.ndarray:
    g = _gray(x)[..., None]
    return np.clip((x - g) * _per_image(factor, x) + g, 0.0, 255.0)


def adjust_hue(x: np.ndarray, offset) -> np.ndarray:
    hsv = rgb_to_hsv(x / 255.0)
    off = np.asarray(offset, dtype=np.float64)
    hsv[..., 0] = (hsv[..., 0] + off.reshape(off.shape + (1, 1))) % 1.0
    return np.clip(hsv_to_rgb(hsv) * 255.0, 0.0, 255.0)


_ADJUST = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def _sample_jitter(strengths, p: float, rng: np.random.Generator, fixed_order: bool):
    if rng.random() >= p:
        return None
    bs, cs, ss, hs = strengths
    factors = (
        rng.uniform(max(0.0, 1 - bs), 1 + bs),
        rng.uniform(max(0.0, 1 - cs), 1 + cs),
        rng.uniform(max(0.0, 1 - ss), 1 + ss),
        rng.uniform(-hs, hs),
    )
    order = np.arange(4) if fixed_order else rng.permutation(4)
    return np.array(factors), order


def _jitter_batch(images: np.ndarray, factors: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Apply per-image adjustment sequences; ``orders[i, s]`` is the op at step ``s`` for image ``i``."""
    x = images.astype(np.float64)
    for step in range(4):
        for k, op in enumerate(_ADJUST):
            sel = np.flatnonzero(orders[:, step] == k)
            if sel.size:
                x[sel] = op(x[sel], factors[sel, k])
    return _to_uint8(x)


def color_jitter(img: np.ndarray, strengths, p: float, rng: np.random.Generator,
                 fixed_order: bool = False) -> np.ndarray:
    """With probability ``p`` apply brightness, contrast, saturation and hue shifts in random order."""
    draw = _sample_jitter(strengths, p, rng, fixed_order)
    if draw is None:
        return img
    factors, order = draw
    return _jitter_batch(img[None], factors[None], order[None])[0]


def _grayscale_batch(images: np.ndarray) -> np.ndarray:
    gray = _to_uint8(_gray(images.astype(np.float64)))
    return np.repeat(gray[..., None], images.shape[-1], axis=-1)


def random_grayscale(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if rng.random() >= p:
        return img
    return _grayscale_batch(img[None])[0]


# -- pipelines ------------------------------------------------------------------

@dataclass
class ViewDraw:
    """All random choices for one view of one image."""
    box: tuple[int, int, int, int]
    flip: bool
    jitter: tuple[np.ndarray, np.ndarray] | None = None
    gray: bool = False


def sample_view(params: TransformParams, height: int, width: int, rng: np.random.Generator) -> ViewDraw:
    """Draw view parameters, consuming ``rng`` exactly as the single-image transforms do."""
    draw = ViewDraw(resized_crop_box(height, width, params.crop_scale_range, rng),
                    bool(rng.random() < params.flip_prob))
    if params.is_strong:
        draw.jitter = _sample_jitter(params.jitter_strengths, params.jitter_prob, rng,
                                     params.fixed_jitter_order)
        draw.gray = bool(rng.random() < params.grayscale_prob)
    return draw


def render_views(images: np.ndarray, draws: list[ViewDraw]) -> np.ndarray:
    """Apply one :class:`ViewDraw` per image of a ``(B, H, W, C)`` uint8 batch."""
    out = _to_uint8(_resize_windows(images, np.array([d.box for d in draws])))
    flip = np.array([d.flip for d in draws])
    out[flip] = out[flip][:, :, ::-1]
    jit = [i for i, d in enumerate(draws) if d.jitter is not None]
    if jit:
        factors = np.stack([draws[i].jitter[0] for i in jit])
        orders = np.stack([draws[i].jitter[1] for i in jit])
        out[jit] = _jitter_batch(out[jit], factors, orders)
    gray = [i for i, d in enumerate(draws) if d.gray]
    if gray:
        out[gray] = _grayscale_batch(out[gray])
    return out


def augment(img: np.ndarray, params: TransformParams, rng: np.random.Generator) -> np.ndarray:
    """Run the uint8 pipeline: crop, flip and, for strong views, jitter and grayscale."""
    draw = sample_view(params, img.shape[0], img.shape[1], rng)
    return render_views(img[None], [draw])[0]


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``images`` scaled to [0, 1]."""
    x = images.reshape(-1, images.shape[-1]).astype(np.float64) / 255.0
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 0, std, 1.0)


def normalize(images: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    if stats is None:
        return x
    mean, std = stats
    return (x - mean) / std


def apply_view(img: np.ndarray, params: TransformParams, rng: np.random.Generator,
               stats: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    return normalize(augment(img, params, rng), stats)
