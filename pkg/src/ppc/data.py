"""Synthetic weakly labeled segmentation data and its binary container.

Each image holds one to three coloured blobs on a noisy background. A blob
has a small saturated core in its class colour and a larger body whose
colour is pulled toward a shared neutral tone, so the class is easy to
recognise from the core but hard to read off the body pixels alone. Blobs
drawn later occlude earlier ones, and background-coloured bars cut through
some blobs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngStream

MAGIC = b"PPCDAT1\0"
_HEADER = struct.Struct("<5I")
SHAPES = ("disk", "square", "triangle")
MAX_COVERAGE = 0.8

# well separated hues; the body tone blends them toward NEUTRAL
CLASS_COLORS = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.35, 0.20],
])
NEUTRAL = np.array([0.55, 0.55, 0.55])


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    image_size: tuple = (64, 64)
    blobs: tuple = (1, 3)
    shapes: tuple = SHAPES
    radius: tuple = (9.0, 15.0)
    core_ratio: float = 0.35
    body_mix: float = 0.75
    color_jitter: float = 0.06
    noise: float = 0.08
    occluder_prob: float = 0.5
    n_train: int = 200
    n_eval: int = 50

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_COLORS):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_COLORS)}")
        lo, hi = self.blobs
        if not 1 <= lo <= hi:
            raise ValueError("blobs range must satisfy 1 <= min <= max")
        if any(s not in SHAPES for s in self.shapes) or not self.shapes:
            raise ValueError(f"shapes must be drawn from {SHAPES}")
        h, w = self.image_size
        if h < 8 or w < 8 or h % 2 or w % 2:
            raise ValueError("image extent must be even and at least 8")
        if not 0 <= self.body_mix <= 1 or not 0 < self.core_ratio <= 1:
            raise ValueError("body_mix must be in [0, 1] and core_ratio in (0, 1]")
        if self.n_train < 0 or self.n_eval < 0:
            raise ValueError("split sizes must be non-negative")


@dataclass
class Split:
    images: np.ndarray   # (N, 3, H, W) float32 in [0, 1]
    masks: np.ndarray    # (N, H, W) uint8, 0 = background
    tags: np.ndarray     # (N, C) bool

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Dataset:
    train: Split
    eval: Split
    num_classes: int
    spec: SynthSpec | None = field(default=None, compare=False)

    @property
    def image_size(self) -> tuple:
        return tuple(self.train.images.shape[-2:] if len(self.train) else self.eval.images.shape[-2:])


def tags_from_mask(mask, num_classes: int) -> np.ndarray:
    present = np.zeros(num_classes, dtype=bool)
    labels = np.unique(mask)
    present[labels[labels > 0] - 1] = True
    return present


def _shape_mask(shape, cy, cx, r, angle, yy, xx):
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "square":
        half = r / np.sqrt(2.0) * 1.15
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle inscribed in radius r
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = angle + np.pi / 2 + 2 * np.pi * k / 3
        inside &= (np.cos(a) * dx + np.sin(a) * dy) <= r / 2
    return inside


def _render(spec: SynthSpec, gen: np.random.Generator):
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    while True:
        base = gen.uniform(0.1, 0.35, 3)
        img = base[:, None, None] + spec.noise * gen.standard_normal((3, h, w))
        mask = np.zeros((h, w), dtype=np.uint8)
        n_blobs = int(gen.integers(spec.blobs[0], spec.blobs[1] + 1))
        classes = gen.choice(spec.num_classes, size=n_blobs, replace=n_blobs > spec.num_classes) + 1
        for c in classes:
            shape = spec.shapes[int(gen.integers(len(spec.shapes)))]
            r = gen.uniform(*spec.radius)
            cy, cx = gen.uniform(r * 0.6, h - r * 0.6), gen.uniform(r * 0.6, w - r * 0.6)
            angle = gen.uniform(0, 2 * np.pi)
            region = _shape_mask(shape, cy, cx, r, angle, yy, xx)
            core = _shape_mask("disk", cy, cx, r * spec.core_ratio, 0.0, yy, xx) & region
            color = CLASS_COLORS[c - 1]
            body = (1 - spec.body_mix) * color + spec.body_mix * NEUTRAL
            body = body + spec.color_jitter * gen.standard_normal(3)
            core_col = color + spec.color_jitter * gen.standard_normal(3)
            shade = 1.0 + 0.5 * spec.noise * gen.standard_normal((h, w))
            img[:, region] = body[:, None] * shade[region]
            img[:, core] = core_col[:, None] * shade[core]
            mask[region] = c
        if gen.random() < spec.occluder_prob:
            # a background-coloured bar hides part of the scene
            thick = gen.uniform(2.0, 5.0)
            a = gen.uniform(0, np.pi)
            off = gen.uniform(-0.3, 0.3) * min(h, w)
            dist = np.cos(a) * (xx - w / 2) + np.sin(a) * (yy - h / 2) - off
            bar = np.abs(dist) <= thick / 2
            img[:, bar] = base[:, None] + spec.noise * gen.standard_normal((3, int(bar.sum())))
            mask[bar] = 0
        coverage = float((mask > 0).mean())
        if 0 < coverage <= MAX_COVERAGE:
            return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _make_split(spec: SynthSpec, n: int, stream: RngStream) -> Split:
    h, w = spec.image_size
    images = np.zeros((n, 3, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.uint8)
    tags = np.zeros((n, spec.num_classes), dtype=bool)
    for i in range(n):
        images[i], masks[i] = _render(spec, stream.child(i).generator)
        tags[i] = tags_from_mask(masks[i], spec.num_classes)
    return Split(images, masks, tags)


def generate_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> Dataset:
    """Deterministic train/eval splits; image ``i`` of a split depends only on ``(seed, split, i)``."""
    root = RngStream(seed, "data-gen")
    return Dataset(_make_split(spec, spec.n_train, root.child(0)),
                   _make_split(spec, spec.n_eval, root.child(1)), spec.num_classes, spec)


def _pack_tags(tags) -> np.ndarray:
    weights = (1 << np.arange(tags.shape[1], dtype=np.uint64)).astype(np.uint64)
    return (tags.astype(np.uint64) @ weights).astype("<u4")


def _unpack_tags(bits, num_classes: int) -> np.ndarray:
    return ((bits[:, None].astype(np.uint64) >> np.arange(num_classes, dtype=np.uint64)) & 1).astype(bool)


def dataset_bytes(ds: Dataset) -> bytes:
    h, w = ds.image_size
    if ds.num_classes > 32:
        raise ValueError("tag bitmask holds at most 32 classes")
    parts = [MAGIC, _HEADER.pack(len(ds.train), len(ds.eval), ds.num_classes, h, w)]
    for split in (ds.train, ds.eval):
        parts.append(np.ascontiguousarray(split.images, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(split.masks, dtype=np.uint8).tobytes())
        parts.append(_pack_tags(split.tags).tobytes())
    return b"".join(parts)


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if buf[:len(MAGIC)] != MAGIC:
        raise ValueError("not a dataset file (bad magic bytes)")
    off = len(MAGIC)
    if len(buf) < off + _HEADER.size:
        raise ValueError("truncated dataset header")
    n_train, n_eval, ncls, h, w = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    splits = []
    for n in (n_train, n_eval):
        sizes = (n * 3 * h * w * 4, n * h * w, n * 4)
        if len(buf) < off + sum(sizes):
            raise ValueError("truncated dataset body")
        images = np.frombuffer(buf, "<f4", n * 3 * h * w, off).reshape(n, 3, h, w).astype(np.float32)
        off += sizes[0]
        masks = np.frombuffer(buf, np.uint8, n * h * w, off).reshape(n, h, w).copy()
        off += sizes[1]
        tags = _unpack_tags(np.frombuffer(buf, "<u4", n, off), ncls)
        off += sizes[2]
        if masks.size and masks.max() > ncls:
            raise ValueError("mask label exceeds class count")
        splits.append(Split(images, masks, tags))
    if off != len(buf):
        raise ValueError("trailing bytes after dataset body")
    return Dataset(splits[0], splits[1], ncls)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())
