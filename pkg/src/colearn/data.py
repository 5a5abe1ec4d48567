"""Datasets, label-noise transition matrices and label corruption."""

from __future__ import annotations

import colorsys
import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ParameterError

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
# truck -> automobile, bird -> airplane, deer -> horse, cat -> dog
CIFAR10_PAIRS = ((9, 1), (2, 0), (4, 7), (3, 5))

CIFAR_RECORD = 1 + 32 * 32 * 3

DATASET_MAGIC = b"CLDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIHHBB")


@dataclass(frozen=True, eq=False)
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) uint8
    clean_labels: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    corruption_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.uint8)
        if images.ndim != 4:
            raise ParameterError(f"images must be (N, H, W, C), got shape {images.shape}")
        clean = np.asarray(self.clean_labels, dtype=np.int64).reshape(-1)
        noisy = np.asarray(self.noisy_labels, dtype=np.int64).reshape(-1)
        n = images.shape[0]
        if clean.shape[0] != n or noisy.shape[0] != n:
            raise ParameterError("label arrays must have one entry per image")
        for name, labels in (("clean_labels", clean), ("noisy_labels", noisy)):
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ParameterError(f"{name} must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "clean_labels", clean)
        object.__setattr__(self, "noisy_labels", noisy)
        object.__setattr__(self, "corruption_mask", clean != noisy)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def label_hash(self) -> str:
        return hashlib.sha256(self.noisy_labels.astype("<i8").tobytes()).hexdigest()


@dataclass(frozen=True)
class TransitionMatrix:
    entries: np.ndarray
    noise_rate: float
    kind: str

    def __post_init__(self):
        q = self.entries
        if np.any(q < 0) or np.any(q > 1):
            raise ParameterError("transition entries must lie in [0, 1]")
        if not np.allclose(q.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ParameterError("transition matrix rows must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]


def _check_rate(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"noise rate must be in [0, 1], got {p}")
    return p


def _check_classes(num_classes: int) -> None:
    if num_classes < 2:
        raise ParameterError("need at least two classes")


def build_symmetric(num_classes: int, p: float, include_true_class: bool = False) -> TransitionMatrix:
    """Uniform flips.

    With ``include_true_class`` the flip target is drawn over all classes, so
    the diagonal keeps ``p / C`` extra mass; otherwise flips go only to the
    ``C - 1`` other classes.
    """
    _check_classes(num_classes)
    p = _check_rate(p)
    c = num_classes
    if include_true_class:
        q = np.full((c, c), p / c)
        np.fill_diagonal(q, 1.0 - p + p / c)
    else:
        q = np.full((c, c), p / (c - 1))
        np.fill_diagonal(q, 1.0 - p)
    return TransitionMatrix(q, p, "symmetric")


def build_asymmetric_pairmap(num_classes: int, p: float,
                             pairs: Iterable[Sequence[int]] = CIFAR10_PAIRS) -> TransitionMatrix:
    _check_classes(num_classes)
    p = _check_rate(p)
    q = np.eye(num_classes)
    seen = set()
    for s, t in pairs:
        if s in seen:
            raise ParameterError(f"duplicate source class {s}")
        if s == t:
            raise ParameterError(f"pair ({s}, {t}) maps a class to itself")
        if not (0 <= s < num_classes and 0 <= t < num_classes):
            raise ParameterError(f"pair ({s}, {t}) out of range")
        seen.add(s)
        q[s, s] = 1.0 - p
        q[s, t] = p
    return TransitionMatrix(q, p, "asymmetric_pairmap")


def build_asymmetric_circular(num_classes: int, p: float) -> TransitionMatrix:
    _check_classes(num_classes)
    p = _check_rate(p)
    q = np.eye(num_classes) * (1.0 - p)
    idx = np.arange(num_classes)
    q[idx, (idx + 1) % num_classes] += p
    return TransitionMatrix(q, p, "asymmetric_circular")


def sample_from_rows(q: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(q, axis=1)[rows]
    u = rng.random(rows.shape[0])
    out = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(out, q.shape[1] - 1)


def corrupt_labels(ds: ImageDataset, q: TransitionMatrix, seed: int) -> ImageDataset:
    """Draw each noisy label from ``Q[clean_label]``; clean labels are kept."""
    if q.num_classes != ds.num_classes:
        raise ParameterError(f"transition matrix is {q.num_classes}x{q.num_classes}, "
                             f"dataset has {ds.num_classes} classes")
    if ds.corruption_mask.any():
        raise ParameterError("dataset is already corrupted")
    rng = np.random.default_rng(seed)
    noisy = sample_from_rows(q.entries, ds.clean_labels, rng)
    return replace(ds, noisy_labels=noisy)


# -- CIFAR-10 binary ------------------------------------------------------------

def load_cifar10_binary(paths: Iterable[str | Path]) -> ImageDataset:
    """Parse CIFAR-10 ``data_batch_*.bin`` style files (1 label byte + 3072 planar RGB bytes)."""
    chunks = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise FormatError(f"label byte {labels.max()} out of range for CIFAR-10")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return ImageDataset(np.ascontiguousarray(images), labels, labels.copy(), 10)


# -- CLDS dataset files ---------------------------------------------------------

def dataset_to_bytes(ds: ImageDataset) -> bytes:
    n, h, w, c = ds.images.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, c, ds.num_classes)
    body = np.concatenate([
        ds.clean_labels.astype(np.uint8)[:, None],
        ds.noisy_labels.astype(np.uint8)[:, None],
        ds.images.reshape(n, -1),
    ], axis=1)
    return header + body.tobytes()


def dataset_from_bytes(raw: bytes) -> ImageDataset:
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than the dataset header")
    magic, version, n, h, w, c, num_classes = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    rec = 2 + h * w * c
    if len(raw) != _HEADER.size + n * rec:
        raise FormatError(f"expected {n} records of {rec} bytes")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    try:
        return ImageDataset(body[:, 2:].reshape(n, h, w, c).copy(), body[:, 0], body[:, 1], num_classes)
    except ParameterError as exc:
        raise FormatError(str(exc)) from exc


def save_dataset(ds: ImageDataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: str | Path) -> ImageDataset:
    return dataset_from_bytes(Path(path).read_bytes())


# -- synthetic patterns ------------------------------------------------------------

SHAPES = (
    "disk", "ring", "hbar", "vbar", "checker", "cross", "square", "frame",
    "diagonal", "triangle", "dots", "xcross", "hstripes", "vstripes", "corner", "diamond",
)


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, r: float) -> np.ndarray:
    """Boolean mask of a pattern centered at the origin of the (yy, xx) grid."""
    ay, ax = np.abs(yy), np.abs(xx)
    rad = np.hypot(yy, xx)
    w = max(r * 0.35, 0.8)
    if kind == "disk":
        return rad <= r
    if kind == "ring":
        return (rad <= r) & (rad >= r * 0.55)
    if kind == "hbar":
        return (ay <= w) & (ax <= r)
    if kind == "vbar":
        return (ax <= w) & (ay <= r)
    if kind == "checker":
        cell = max(r / 2, 1.0)
        return (ay <= r) & (ax <= r) & ((np.floor(yy / cell) + np.floor(xx / cell)) % 2 == 0)
    if kind == "cross":
        return ((ay <= w * 0.7) & (ax <= r)) | ((ax <= w * 0.7) & (ay <= r))
    if kind == "square":
        return (ay <= r * 0.8) & (ax <= r * 0.8)
    if kind == "frame":
        return (np.maximum(ay, ax) <= r) & (np.maximum(ay, ax) >= r * 0.6)
    if kind == "diagonal":
        return (np.abs(yy - xx) <= w) & (rad <= r * 1.2)
    if kind == "triangle":
        return (yy <= r * 0.7) & (yy >= -r) & (ax <= (yy + r) * 0.55)
    if kind == "dots":
        return (np.hypot(yy, xx - r * 0.6) <= r * 0.4) | (np.hypot(yy, xx + r * 0.6) <= r * 0.4)
    if kind == "xcross":
        return ((np.abs(yy - xx) <= w * 0.8) | (np.abs(yy + xx) <= w * 0.8)) & (rad <= r * 1.2)
    if kind == "hstripes":
        return (ay <= r) & (ax <= r) & (np.floor(yy / max(r / 2.5, 1.0)) % 2 == 0)
    if kind == "vstripes":
        return (ay <= r) & (ax <= r) & (np.floor(xx / max(r / 2.5, 1.0)) % 2 == 0)
    if kind == "corner":
        return ((yy >= r * 0.4) & (yy <= r) & (xx >= -r) & (xx <= r)) | \
               ((xx >= -r) & (xx <= -r * 0.4) & (yy >= -r) & (yy <= r))
    if kind == "diamond":
        return ay + ax <= r
    raise ParameterError(f"unknown shape {kind!r}")


def class_hue(k: int, num_classes: int) -> float:
    """Evenly spaced hues, interleaved so consecutive classes sit about half a cycle apart."""
    half = -(-num_classes // 2)
    return (k // 2 + (k % 2) * half) / num_classes


def _render(label: int, num_classes: int, side: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.arange(side) + 0.5
    cy, cx = rng.uniform(0.3 * side, 0.7 * side, size=2)
    r = rng.uniform(0.22 * side, 0.4 * side)
    yy, xx = np.meshgrid(grid - cy, grid - cx, indexing="ij")
    mask = _shape_mask(SHAPES[label], yy, xx, r)

    hue = (class_hue(label, num_classes) + rng.uniform(-0.45, 0.45) / num_classes) % 1.0
    sat = rng.uniform(0.35, 1.0)
    val = rng.uniform(0.45, 1.0)
    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    bg = np.full(3, rng.uniform(0.0, 0.45)) + rng.uniform(-0.08, 0.08, size=3)

    img = np.where(mask[..., None], fg, bg)
    img = img + rng.normal(0.0, 10.0 / 255.0, size=img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(num_classes: int = 10, n_train: int = 5000, n_test: int = 1000,
                       side: int = 16, seed: int = 0) -> tuple[ImageDataset, ImageDataset]:
    """Procedural colored-shape classification task (train split, test split).

    Class ``k`` draws shape ``SHAPES[k]`` in the class hue of :func:`class_hue` at a
    random position and size over a random gray background, then adds pixel
    noise with std 10/255. Labels are balanced and shuffled.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ParameterError(f"num_classes must be in [2, {len(SHAPES)}]")
    if side < 8:
        raise ParameterError("side must be at least 8")
    if n_train < 0 or n_test < 0:
        raise ParameterError("split sizes must be non-negative")
    rng = np.random.default_rng(seed)
    splits = []
    for n in (n_train, n_test):
        labels = rng.permutation(np.arange(n) % num_classes)
        images = np.stack([_render(int(k), num_classes, side, rng) for k in labels]) if n \
            else np.zeros((0, side, side, 3), np.uint8)
        splits.append(ImageDataset(images, labels, labels.copy(), num_classes))
    return splits[0], splits[1]
