"""Datasets, the LTDS file format, synthetic motif tasks and augmentation."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _binio
from .errors import DatasetError, LabelRangeError
from .numeric import make_rng

DS_MAGIC = b"LTDS"
DS_VERSION = 1
PAD = 4


@dataclass(eq=False)
class Dataset:
    """Raw 8-bit images plus the per-channel statistics used to normalise them."""

    pixels: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int
    mean: np.ndarray  # float32, (C,)
    std: np.ndarray  # float32, (C,)
    split: str = "train"

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float32).reshape(-1)
        if self.pixels.ndim != 4:
            raise DatasetError(f"pixels must be (N, C, H, W), got {self.pixels.shape}")
        n, c = self.pixels.shape[:2]
        if n == 0:
            raise DatasetError("dataset is empty")
        if self.labels.shape != (n,):
            raise DatasetError("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise DatasetError("mean/std need one entry per channel")
        if np.any(self.std <= 0):
            raise DatasetError("channel std must be positive")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[1:]

    @cached_property
    def images(self) -> np.ndarray:
        """Normalised float32 images: ``(pixel / 255 - mean) / std`` per channel."""
        x = self.pixels.astype(np.float32) / np.float32(255.0)
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.pixels[idx], self.labels[idx], self.num_classes, self.mean,
                       self.std, split or self.split)

    def with_stats(self, mean, std) -> "Dataset":
        return Dataset(self.pixels, self.labels, self.num_classes, mean, std, self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def channel_stats(pixels: np.ndarray):
    x = pixels.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)


def adapt_channels(ds: Dataset, channels: int) -> Dataset:
    """Replicate a single-channel dataset to ``channels`` channels."""
    c = ds.shape[0]
    if c == channels:
        return ds
    if c != 1:
        raise DatasetError(f"cannot adapt {c} channels to {channels}")
    return Dataset(np.repeat(ds.pixels, channels, axis=1), ds.labels, ds.num_classes,
                   np.repeat(ds.mean, channels), np.repeat(ds.std, channels), ds.split)


# --------------------------------------------------------------------------- LTDS

def dataset_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.pixels.shape
    if c > 0xFF or h > 0xFFFF or w > 0xFFFF or ds.num_classes > 0xFFFF:
        raise DatasetError("dataset extents exceed the LTDS header fields")
    out = bytearray()
    out += DS_MAGIC
    out += struct.pack("<HIBHHH", DS_VERSION, n, c, h, w, ds.num_classes)
    out += ds.mean.astype("<f4").tobytes() + ds.std.astype("<f4").tobytes()
    out += ds.pixels.tobytes()
    out += ds.labels.astype("<u2").tobytes()
    return bytes(out)


def save_dataset(ds: Dataset, path) -> None:
    _binio.atomic_write(Path(path), dataset_bytes(ds))


def parse_dataset(data: bytes, split="train") -> Dataset:
    r = _binio.Reader(data)
    r.magic(DS_MAGIC)
    version, n, c, h, w, k = r.unpack("<HIBHHH")
    if version != DS_VERSION:
        raise _binio.FormatError(f"unsupported LTDS version {version}")
    mean = np.frombuffer(r.take(4 * c), "<f4")
    std = np.frombuffer(r.take(4 * c), "<f4")
    pixels = np.frombuffer(r.take(n * c * h * w), np.uint8).reshape(n, c, h, w)
    labels = np.frombuffer(r.take(2 * n), "<u2").astype(np.int64)
    r.done()
    if n and labels.max() >= k:
        raise LabelRangeError(f"label {labels.max()} out of range for {k} classes")
    return Dataset(pixels.copy(), labels, k, mean.copy(), std.copy(), split)


def load_dataset(path, split="train") -> Dataset:
    return parse_dataset(Path(path).read_bytes(), split)


# --------------------------------------------------------------------------- splits

def split(ds: Dataset, val_fraction: float, seed: int):
    """Stratified, seeded train/validation split.

    Each class contributes ``max(1, floor(val_fraction * n_class))`` examples
    to validation; both parts keep the original order.
    """
    if not 0.0 < val_fraction < 0.5:
        raise DatasetError("val_fraction must lie in (0, 0.5)")
    val_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DatasetError(f"class {c} has fewer than 2 examples")
        n_val = max(1, math.floor(val_fraction * idx.size + 1e-9))
        perm = make_rng(seed, "split", c).permutation(idx.size)
        val_idx.append(idx[perm[:n_val]])
    val_idx = np.sort(np.concatenate(val_idx))
    train_mask = np.ones(len(ds), dtype=bool)
    train_mask[val_idx] = False
    return ds.subset(np.flatnonzero(train_mask), "train"), ds.subset(val_idx, "val")


# --------------------------------------------------------------------------- augmentation

def augment_with(batch: np.ndarray, flips, offsets) -> np.ndarray:
    """Flip where ``flips`` is true, zero-pad by 4 and crop at ``offsets`` (row, col in [0, 8])."""
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), dtype=batch.dtype)
    src = np.where(np.asarray(flips, bool)[:, None, None, None], batch[..., ::-1], batch)
    padded[:, :, PAD:PAD + h, PAD:PAD + w] = src
    out = np.empty_like(batch)
    for i, (r, col) in enumerate(offsets):
        out[i] = padded[i, :, r:r + h, col:col + w]
    return out


def augment(batch: np.ndarray, seed, *keys) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and random 4-pixel pad-and-crop per image."""
    rng = make_rng(seed, "augment", *keys)
    n = batch.shape[0]
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    return augment_with(batch, flips, offsets)


# --------------------------------------------------------------------------- synthetic tasks

def _motif(kind: str, h: int, w: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = 0.3 * min(h, w)
    t = max(0.6, r / 5)
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    d2 = dy * dy + dx * dx
    if kind == "hbar":
        m = (np.abs(dy) <= t) & (np.abs(dx) <= r)
    elif kind == "vbar":
        m = (np.abs(dx) <= t) & (np.abs(dy) <= r)
    elif kind == "diag":
        m = (np.abs(dy - dx) <= 1.2 * t) & inside
    elif kind == "anti":
        m = (np.abs(dy + dx) <= 1.2 * t) & inside
    elif kind == "plus":
        m = ((np.abs(dy) <= t) | (np.abs(dx) <= t)) & inside
    elif kind == "xcross":
        m = ((np.abs(dy - dx) <= 1.2 * t) | (np.abs(dy + dx) <= 1.2 * t)) & inside
    elif kind == "disk":
        m = d2 <= r * r
    elif kind == "ring":
        m = (d2 <= r * r) & (d2 >= (r - 1.5 * t) ** 2)
    elif kind == "checker":
        p = max(2, int(round(r / 2)))
        m = ((np.floor(dy / p) + np.floor(dx / p)) % 2 == 0) & inside
    elif kind == "square":
        m = inside & (np.maximum(np.abs(dy), np.abs(dx)) >= r - 1.5 * t)
    elif kind == "triangle":
        m = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    elif kind == "hstripes":
        m = ((np.abs(dy - r / 1.6) <= t) | (np.abs(dy + r / 1.6) <= t)) & (np.abs(dx) <= r)
    elif kind == "vstripes":
        m = ((np.abs(dx - r / 1.6) <= t) | (np.abs(dx + r / 1.6) <= t)) & (np.abs(dy) <= r)
    elif kind == "corner":
        m = (((np.abs(dx + r / 2) <= t) & (np.abs(dy) <= r))
             | ((np.abs(dy - r / 2) <= t) & (np.abs(dx) <= r)))
        m &= (dx >= -r / 2 - t) & (dy <= r / 2 + t)
    elif kind == "tee":
        m = (((np.abs(dy + r / 2) <= t) & (np.abs(dx) <= r))
             | ((np.abs(dx) <= t) & (dy >= -r / 2) & (dy <= r)))
    elif kind == "dots":
        q = r / 2
        m = np.zeros((h, w), bool)
        for sy in (-q, q):
            for sx in (-q, q):
                m |= (dy - sy) ** 2 + (dx - sx) ** 2 <= (1.3 * t) ** 2
    else:
        raise DatasetError(f"unknown motif {kind!r}")
    return m.astype(np.float64)


# diag/anti are the only left-right mirror pair (13 apart), so class identity survives
# horizontal flips for any contiguous run of 13 motifs.  Below about 12x12 pixels
# ring, square and dots become indistinguishable.
MOTIFS = ("hbar", "vbar", "diag", "plus", "xcross", "disk", "ring", "checker", "square",
          "triangle", "hstripes", "vstripes", "corner", "tee", "dots", "anti")


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional motif images.

    Class ``c`` draws motif ``MOTIFS[first_motif + c]`` at a random integer
    offset of up to ``jitter`` pixels, scaled by a random brightness in
    [0.6, 1] and, per channel, a random tint in [0.5, 1]; Gaussian noise with
    standard deviation ``noise`` (in [0, 1] pixel units) is added before 8-bit
    quantisation.
    """

    num_classes: int = 10
    shape: tuple = (3, 16, 16)
    samples_per_class: int = 100
    noise: float = 0.1
    test_per_class: int | None = None
    val_fraction: float = 0.2
    first_motif: int = 0
    jitter: int | None = None

    def validate(self):
        c, h, w = self.shape
        if h < 8 or w < 8:
            raise DatasetError("synthetic images must be at least 8x8")
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")
        if self.first_motif < 0 or self.first_motif + self.num_classes > len(MOTIFS):
            raise DatasetError(f"only {len(MOTIFS)} motifs are available")
        if self.samples_per_class < 2:
            raise DatasetError("need at least two samples per class")
        if self.noise < 0:
            raise DatasetError("noise must be non-negative")

    @property
    def motifs(self) -> tuple:
        return MOTIFS[self.first_motif:self.first_motif + self.num_classes]

    @property
    def max_jitter(self) -> int:
        return self.jitter if self.jitter is not None else max(1, self.shape[1] // 8)


def motif_templates(spec: SyntheticSpec) -> list[np.ndarray]:
    """All noise-free gray templates per class, one per allowed offset: ``[(K, H, W)]``."""
    _, h, w = spec.shape
    j = spec.max_jitter
    out = []
    for kind in spec.motifs:
        out.append(np.stack([_motif(kind, h, w, (h - 1) / 2 + oy, (w - 1) / 2 + ox)
                             for oy in range(-j, j + 1) for ox in range(-j, j + 1)]))
    return out


def _render(spec: SyntheticSpec, labels: np.ndarray, rng) -> np.ndarray:
    c, h, w = spec.shape
    j = spec.max_jitter
    n = labels.size
    offsets = rng.integers(-j, j + 1, size=(n, 2))
    bright = rng.uniform(0.6, 1.0, size=n)
    tint = rng.uniform(0.5, 1.0, size=(n, c))
    noise = rng.standard_normal((n, c, h, w)) * spec.noise
    cache = {}
    out = np.empty((n, c, h, w), dtype=np.uint8)
    for i in range(n):
        key = (int(labels[i]), int(offsets[i, 0]), int(offsets[i, 1]))
        if key not in cache:
            cache[key] = _motif(spec.motifs[key[0]], h, w, (h - 1) / 2 + key[1], (w - 1) / 2 + key[2])
        img = bright[i] * tint[i][:, None, None] * cache[key][None] + noise[i]
        out[i] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int):
    """Deterministic ``(train, val, test)`` datasets normalised with train statistics."""
    spec.validate()
    k = spec.num_classes
    test_per_class = spec.test_per_class or max(2, spec.samples_per_class // 2)
    pool_labels = np.repeat(np.arange(k), spec.samples_per_class)
    test_labels = np.repeat(np.arange(k), test_per_class)
    pool_labels = pool_labels[make_rng(seed, "synthetic", "order").permutation(pool_labels.size)]
    pool = _render(spec, pool_labels, make_rng(seed, "synthetic", "pool"))
    test = _render(spec, test_labels, make_rng(seed, "synthetic", "test"))
    ones = np.ones(spec.shape[0], np.float32)
    pool_ds = Dataset(pool, pool_labels, k, ones * 0.5, ones)
    train, val = split(pool_ds, spec.val_fraction, seed)
    mean, std = channel_stats(train.pixels)
    return (train.with_stats(mean, std), val.with_stats(mean, std),
            Dataset(test, test_labels, k, mean, std, "test"))


def template_classify(pixels: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Nearest-template oracle: best cosine similarity over every class and offset."""
    gray = pixels.astype(np.float64).mean(axis=1).reshape(len(pixels), -1)
    gray /= np.maximum(np.linalg.norm(gray, axis=1, keepdims=True), 1e-12)
    scores = []
    for templates in motif_templates(spec):
        t = templates.reshape(len(templates), -1)
        t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
        scores.append((gray @ t.T).max(axis=1))
    return np.argmax(np.stack(scores, axis=1), axis=1)


# --------------------------------------------------------------------------- tasks

@dataclass
class TaskSpec:
    name: str
    train: Dataset
    val: Dataset
    test: Dataset
    num_classes: int = field(default=0)
    augment: bool = True

    def __post_init__(self):
        if not self.num_classes:
            self.num_classes = self.train.num_classes
        for ds in (self.train, self.val, self.test):
            if ds.num_classes != self.num_classes:
                raise DatasetError(f"{self.name}: inconsistent class counts across splits")
            if ds.shape != self.train.shape:
                raise DatasetError(f"{self.name}: inconsistent image shapes across splits")
        if np.any(self.train.class_counts() == 0):
            raise DatasetError(f"{self.name}: every class must appear in the training split")

    @property
    def input_shape(self) -> tuple:
        return self.train.shape

    def with_channels(self, channels: int) -> "TaskSpec":
        return TaskSpec(self.name, adapt_channels(self.train, channels),
                        adapt_channels(self.val, channels), adapt_channels(self.test, channels),
                        self.num_classes, self.augment)


def synthetic_task(name: str, spec: SyntheticSpec, seed: int, augment=True) -> TaskSpec:
    train, val, test = generate_synthetic(spec, seed)
    return TaskSpec(name, train, val, test, spec.num_classes, augment)
