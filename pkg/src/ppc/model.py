"""Small convolutional encoder, CAM head and projector with manual backprop.

Images are ``(B, 3, H, W)``; the encoder runs channels-last internally and
returns ``(B, D, H/2, W/2)`` features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prototypes import PROJ_DIM
from .tensor import DTYPE, RngStream

ENCODER_WIDTHS = (8, 16)
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "cam_w", "proj_w")


@dataclass
class ModelParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    cam_w: np.ndarray    # (C, D)
    proj_w: np.ndarray   # (P, D)

    @classmethod
    def init(cls, num_classes: int, feat_dim: int = 32, proj_dim: int = PROJ_DIM,
             in_channels: int = 3, seed: int = 0) -> "ModelParams":
        gen = RngStream(seed, "init").generator
        widths = (in_channels,) + ENCODER_WIDTHS + (feat_dim,)
        kw = {}
        for i in range(3):
            cin, cout = widths[i], widths[i + 1]
            kw[f"conv{i + 1}_w"] = gen.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
            kw[f"conv{i + 1}_b"] = np.zeros(cout)
        kw["cam_w"] = gen.normal(0.0, np.sqrt(1.0 / feat_dim), (num_classes, feat_dim))
        kw["proj_w"] = gen.normal(0.0, np.sqrt(2.0 / feat_dim), (proj_dim, feat_dim))
        return cls(**kw)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d) -> "ModelParams":
        return cls(**{k: np.asarray(d[k], dtype=DTYPE) for k in PARAM_NAMES})

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @property
    def num_classes(self) -> int:
        return self.cam_w.shape[0]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.as_dict())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as z:
            return cls.from_dict(z)


def _conv_forward(x, w, b):
    # x: (B, H, W, Cin) channels-last; w: (Cout, Cin, 3, 3); columns ordered (kh, kw, Cin)
    bsz, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((bsz, h, wd, 9, cin), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j] = xp[:, i:i + h, j:j + wd]
    cols = cols.reshape(bsz * h * wd, 9 * cin)
    out = cols @ _taps_last(w).astype(x.dtype).T + b.astype(x.dtype)
    return out.reshape(bsz, h, wd, -1), cols


def _taps_last(w):
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_backward(dy, cols, w, in_shape, need_dx=True):
    bsz, h, wd, cin = in_shape
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = (dyf.T @ cols).reshape(w.shape[0], 3, 3, cin).transpose(0, 3, 1, 2).astype(DTYPE)
    db = dyf.sum(axis=0, dtype=DTYPE)
    if not need_dx:
        return None, dw, db
    dcols = (dyf @ _taps_last(w).astype(dy.dtype)).reshape(bsz, h, wd, 9, cin)
    dxp = np.zeros((bsz, h + 2, wd + 2, cin), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, 3 * i + j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def encoder_forward(params: ModelParams, images, conv_dtype=DTYPE):
    """Three 3x3 conv + ReLU layers then 2x2 average pooling.

    Returns ``(features (B, D, H/2, W/2), cache)``. The convolutions run in
    ``conv_dtype`` (float32 roughly halves training time); features are
    always returned in 64-bit.
    """
    # centred input keeps early SGD steps well conditioned
    x = np.ascontiguousarray(np.asarray(images, dtype=conv_dtype).transpose(0, 2, 3, 1) - conv_dtype(0.5))
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"image extent {x.shape[1:3]} must be even")
    cache = []
    for i in (1, 2, 3):
        w, b = getattr(params, f"conv{i}_w"), getattr(params, f"conv{i}_b")
        pre, cols = _conv_forward(x, w, b)
        cache.append((x.shape, cols, pre > 0))
        x = np.maximum(pre, 0.0)
    bsz, h, wd, d = x.shape
    pooled = x.reshape(bsz, h // 2, 2, wd // 2, 2, d).mean(axis=(2, 4))
    return np.ascontiguousarray(pooled.transpose(0, 3, 1, 2), dtype=DTYPE), cache


def encoder_backward(params: ModelParams, cache, dfeat) -> dict:
    """Gradients of the conv weights and biases given ``d loss / d features``."""
    g = np.asarray(dfeat, dtype=cache[0][1].dtype).transpose(0, 2, 3, 1) / 4
    g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
    grads = {}
    for i in (3, 2, 1):
        in_shape, cols, active = cache[i - 1]
        g = g * active
        w = getattr(params, f"conv{i}_w")
        g, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = _conv_backward(g, cols, w, in_shape, need_dx=i > 1)
    return grads


def relu_pattern(cache) -> bytes:
    """Activation pattern of a forward pass, used to detect kinks in FD checks."""
    return b"".join(np.packbits(active).tobytes() for _, _, active in cache)


def soft_margin_loss(scores, targets):
    """Multi-label soft margin: mean over classes of ``log(1 + exp(-t * s))``.

    ``targets`` is a ``(B, C)`` boolean array; returns ``(mean over images,
    d loss / d scores)``.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    t = np.where(np.asarray(targets, dtype=bool), 1.0, -1.0)
    z = -t * scores
    loss = np.logaddexp(0.0, z)
    bsz, ncls = scores.shape
    sig = np.exp(-np.logaddexp(0.0, -z))   # sigmoid(z)
    grad = -t * sig / (bsz * ncls)
    return float(loss.mean()), grad


def classification_loss(scores, tags) -> float:
    """Soft-margin loss of one score vector given its tag set (classes ``1..C``)."""
    scores = np.asarray(scores, dtype=DTYPE)
    target = np.zeros((1, scores.shape[-1]), dtype=bool)
    for c in tags:
        target[0, c - 1] = True
    return soft_margin_loss(scores.reshape(1, -1), target)[0]
