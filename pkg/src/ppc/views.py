"""Spatial transforms between the source and target views of an image.

Every transform is an affine map evaluated by inverse sampling, so resampling
a ``(..., H, W)`` array is a fixed sparse linear operator. The operator's
transpose carries gradients from the aligned view back to the original grid.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cam import normalize_maps, pseudo_labels
from .tensor import DTYPE, channel_matmul, l2_normalize_pixels

DEFAULT_RESCALE = 128 / 448
OUTPUT_STRIDE = 2
_SNAP = 1e-9


@dataclass(frozen=True)
class SpatialTransform:
    """Rescale optionally combined with a flip, a rotation or a translation.

    ``translate`` is ``(dx, dy)`` in pixels of the target image; positive
    values move content right / down. ``rotate`` is in degrees.
    """

    rescale: float = 1.0
    hflip: bool = False
    rotate: float = 0.0
    translate: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.rescale > 0:
            raise ValueError(f"rescale factor must be > 0, got {self.rescale}")
        if not -20.0 <= self.rotate <= 20.0:
            raise ValueError(f"rotation must lie in [-20, 20] degrees, got {self.rotate}")
        object.__setattr__(self, "translate", (float(self.translate[0]), float(self.translate[1])))

    @property
    def kind(self) -> str:
        parts = []
        if self.rescale != 1.0:
            parts.append("rescale")
        if self.hflip:
            parts.append("hflip")
        if self.rotate:
            parts.append("rotate")
        if any(self.translate):
            parts.append("translate")
        return "+".join(parts) or "identity"

    @property
    def preserves_support(self) -> bool:
        return self.rotate == 0.0 and not any(self.translate)

    @classmethod
    def from_names(cls, names, rescale_factor=DEFAULT_RESCALE, rotate_deg=10.0, translate_px=(8.0, 0.0)):
        """Build from names like ``"rescale,hflip"`` (the CLI ``--transform`` value)."""
        if isinstance(names, str):
            names = [n for n in names.split(",") if n]
        kw = {}
        for name in names:
            if name == "rescale":
                kw["rescale"] = float(rescale_factor)
            elif name in ("hflip", "flip"):
                kw["hflip"] = True
            elif name in ("rotate", "rotation"):
                kw["rotate"] = float(rotate_deg)
            elif name in ("translate", "translation"):
                kw["translate"] = tuple(translate_px)
            elif name != "identity":
                raise ValueError(f"unknown transform {name!r}")
        return cls(**kw)


def target_extent(hw, tr: SpatialTransform, stride: int = OUTPUT_STRIDE) -> tuple[int, int]:
    """Image extent of the target view, kept a multiple of ``stride``."""
    def one(n):
        return max(stride, int(math.floor(n * tr.rescale / stride + 0.5)) * stride)
    return one(hw[0]), one(hw[1])


def _source_coords(tr, in_hw, out_hw, scale):
    hi, wi = in_hw
    ho, wo = out_hw
    jj, ii = np.meshgrid(np.arange(wo, dtype=DTYPE), np.arange(ho, dtype=DTYPE))
    px = jj + 0.5 - wo / 2.0 - tr.translate[0] / scale
    py = ii + 0.5 - ho / 2.0 - tr.translate[1] / scale
    if tr.rotate:
        a = math.radians(tr.rotate)
        ca, sa = math.cos(a), math.sin(a)
        px, py = ca * px + sa * py, -sa * px + ca * py
    if tr.hflip:
        px = -px
    x = px * (wi / wo) + wi / 2.0 - 0.5
    y = py * (hi / ho) + hi / 2.0 - 0.5
    for arr in (x, y):
        r = np.round(arr)
        snap = np.abs(arr - r) < _SNAP
        arr[snap] = r[snap]
    return x, y


@functools.lru_cache(maxsize=256)
def resample_operator(tr: SpatialTransform, in_hw, out_hw, interp: str = "bilinear", scale: float = 1.0):
    """Sparse ``(Ho*Wo, Hi*Wi)`` sampling matrix and the ``(Ho, Wo)`` validity mask.

    ``scale`` is the input resolution's stride relative to the image, used
    to express the translation in local pixels.
    """
    if interp not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    hi, wi = in_hw
    ho, wo = out_hw
    if min(hi, wi, ho, wo) < 1:
        raise ValueError(f"degenerate extent: input {in_hw}, output {out_hw}")
    x, y = _source_coords(tr, in_hw, out_hw, scale)
    if tr.preserves_support:
        valid = np.ones((ho, wo), dtype=bool)
    else:
        valid = (x >= -0.5) & (x <= wi - 0.5) & (y >= -0.5) & (y <= hi - 0.5)
    x = np.clip(x, 0.0, wi - 1.0)
    y = np.clip(y, 0.0, hi - 1.0)
    rows = np.arange(ho * wo)
    keep = valid.ravel()
    if interp == "nearest":
        xi = np.floor(x + 0.5).astype(np.int64).ravel()
        yi = np.floor(y + 0.5).astype(np.int64).ravel()
        cols = yi * wi + xi
        m = sp.csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(ho * wo, hi * wi))
        return m, valid
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, wi - 1)
    y1 = np.minimum(y0 + 1, hi - 1)
    fx = (x - x0).ravel()
    fy = (y - y0).ravel()
    x0, x1, y0, y1 = (a.ravel() for a in (x0, x1, y0, y1))
    r, c, v = [], [], []
    for yy, xx, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        nz = keep & (wgt != 0)
        r.append(rows[nz])
        c.append(yy[nz] * wi + xx[nz])
        v.append(wgt[nz])
    m = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(ho * wo, hi * wi))
    m.sum_duplicates()
    return m, valid


def apply_transform(t, tr: SpatialTransform, interp: str = "bilinear", out_shape=None, scale: float = 1.0):
    """Resample the trailing ``(H, W)`` axes of ``t``; returns ``(out, valid)``.

    With ``interp="nearest"`` integer label grids keep their dtype. Pixels
    outside the transformed support are zero and flagged invalid.
    """
    t = np.asarray(t)
    hi, wi = t.shape[-2:]
    if out_shape is None:
        out_shape = (max(1, int(math.floor(hi * tr.rescale + 0.5))), max(1, int(math.floor(wi * tr.rescale + 0.5))))
    out_shape = tuple(int(s) for s in out_shape)
    if min(out_shape) < 1:
        raise ValueError(f"transform yields degenerate extent {out_shape}")
    m, valid = resample_operator(tr, (hi, wi), out_shape, interp, float(scale))
    lead = t.shape[:-2]
    flat = t.reshape((-1, hi * wi))
    if interp == "nearest" and not np.issubdtype(t.dtype, np.floating):
        src = m.indices
        out = np.zeros((flat.shape[0], out_shape[0] * out_shape[1]), dtype=t.dtype)
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        out[:, rows] = flat[:, src]
    else:
        out = np.asarray((m @ flat.astype(DTYPE).T).T)
    return out.reshape(lead + out_shape), valid


def adjoint_transform(g, tr: SpatialTransform, in_shape, interp: str = "bilinear", scale: float = 1.0):
    """Transpose of :func:`apply_transform`: maps gradients on the output grid back."""
    g = np.asarray(g, dtype=DTYPE)
    out_shape = g.shape[-2:]
    m, _ = resample_operator(tr, tuple(in_shape), tuple(out_shape), interp, float(scale))
    flat = g.reshape((-1, out_shape[0] * out_shape[1]))
    back = np.asarray((m.T @ flat.T).T)
    return back.reshape(g.shape[:-2] + tuple(in_shape))


@dataclass
class ViewData:
    """Per-view head outputs on the shared (target) grid, batch-first."""

    features: np.ndarray      # (B, D, h, w)
    cam_pre: np.ndarray       # (B, C, h, w) 1x1-conv output before ReLU
    cams: np.ndarray          # (B, C, h, w) ReLU'd, tag-masked
    cams_norm: np.ndarray     # (B, C, h, w) per-class max-normalized over valid pixels
    labels: np.ndarray        # (B, h, w) pseudo labels in {0..C}
    proj_pre: np.ndarray      # (B, P, h, w) projector output after ReLU, before L2
    v: np.ndarray             # (B, P, h, w) unit embeddings, zero where degenerate
    degenerate: np.ndarray    # (B, h, w)
    valid: np.ndarray         # (B, h, w)

    @property
    def usable(self) -> np.ndarray:
        return self.valid & ~self.degenerate

    def confidence(self) -> np.ndarray:
        """``(B, C+1, h, w)`` weights for prototype estimation.

        Channel 0 (background) is ``1 - max_c cams_norm``; class channels hold
        the raw CAM values.
        """
        bg = 1.0 - self.cams_norm.max(axis=1, keepdims=True)
        return np.concatenate([bg, self.cams], axis=1)

    def flat(self):
        """Embeddings as ``(N, P)`` with pixels in ``(image, h, w)`` order."""
        b, p, h, w = self.v.shape
        return self.v.transpose(0, 2, 3, 1).reshape(b * h * w, p)


@dataclass
class ViewPair:
    source: ViewData          # source view aligned onto the target grid
    target: ViewData
    transform: SpatialTransform
    valid: np.ndarray         # (B, h, w)
    tags: np.ndarray          # (B, C) bool
    extras: dict = field(default_factory=dict)


def view_from_features(f, cam_w, proj_w, tags, valid, theta_bg) -> ViewData:
    """Compute CAMs, pseudo labels and projections from a feature batch."""
    f = np.asarray(f, dtype=DTYPE)
    cam_pre = channel_matmul(f, cam_w)
    cams = np.maximum(cam_pre, 0.0) * tags[:, :, None, None]
    cams_norm = normalize_maps(cams, valid)
    labels = pseudo_labels(cams_norm, theta_bg)
    proj_pre = np.maximum(channel_matmul(f, proj_w), 0.0)
    v, degenerate = l2_normalize_pixels(proj_pre)
    return ViewData(f, cam_pre, cams, cams_norm, labels, proj_pre, v, degenerate, valid)


def build_view_pair(f_source, f_target, tr, cam_w, proj_w, tags, theta_bg, stride=OUTPUT_STRIDE) -> ViewPair:
    """Align source features to the target grid and evaluate both heads."""
    tags = np.asarray(tags, dtype=bool)
    ht, wt = f_target.shape[-2:]
    f_aligned, valid = apply_transform(f_source, tr, "bilinear", (ht, wt), scale=stride)
    valid_b = np.broadcast_to(valid, (f_target.shape[0], ht, wt)).copy()
    src = view_from_features(f_aligned, cam_w, proj_w, tags, valid_b, theta_bg)
    tgt = view_from_features(f_target, cam_w, proj_w, tags, valid_b, theta_bg)
    return ViewPair(src, tgt, tr, valid_b, tags)


def make_view_pair(image, encoder, cam_w, proj_w, tags, tr: SpatialTransform,
                   theta_bg: float = 0.3, stride: int = OUTPUT_STRIDE) -> ViewPair:
    """Forward both views through a shared ``encoder`` and build the pair.

    ``image`` is ``(3, H, W)`` or a batch ``(B, 3, H, W)``; ``tags`` is a set
    of classes (single image) or a ``(B, C)`` boolean array. ``encoder`` maps
    an image batch to ``(B, D, H/stride, W/stride)`` features.
    """
    image = np.asarray(image, dtype=DTYPE)
    single = image.ndim == 3
    if single:
        image = image[None]
        num_classes = np.asarray(cam_w).shape[0]
        tv = np.zeros((1, num_classes), dtype=bool)
        for c in tags:
            tv[0, c - 1] = True
        tags = tv
    hw = image.shape[-2:]
    t_img, _ = apply_transform(image, tr, "bilinear", target_extent(hw, tr, stride))
    return build_view_pair(encoder(image), encoder(t_img), tr, cam_w, proj_w, tags, theta_bg, stride)
