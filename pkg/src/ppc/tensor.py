"""Dense float64 array primitives shared by every other module.

Arrays are plain ``numpy.ndarray`` objects in C (row-major) order with
dtype float64. Channel-first layout is used throughout: a feature map is
``(D, H, W)`` and a batch of them is ``(B, D, H, W)``.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

_STREAM_CODES = {"data-gen": 0, "sampling": 1, "init": 2}


class DimensionError(ValueError):
    """Raised when array extents are incompatible with an operation."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def channel_matmul(f: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply a 1x1 convolution: ``out[..., c, h, w] = sum_j w[c, j] f[..., j, h, w]``.

    ``f`` may carry a leading batch axis.
    """
    f = np.asarray(f, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    if f.ndim not in (3, 4) or w.ndim != 2:
        raise DimensionError(f"expected (B,)D,H,W features and CxD weights, got {f.shape} and {w.shape}")
    d = f.shape[-3]
    if w.shape[1] != d:
        raise DimensionError(f"weight inner dim {w.shape[1]} != feature channels {d}")
    h, wd = f.shape[-2:]
    flat = f.reshape(f.shape[:-3] + (d, h * wd))
    out = np.matmul(w, flat)
    return out.reshape(f.shape[:-3] + (w.shape[0], h, wd))


def spatial_mean(t: np.ndarray) -> np.ndarray:
    """Global average pooling over the two trailing axes."""
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim < 2 or t.shape[-1] * t.shape[-2] == 0:
        raise DimensionError(f"empty spatial extent in shape {t.shape}")
    return t.reshape(t.shape[:-2] + (-1,)).mean(axis=-1)


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(t, dtype=DTYPE), 0.0)


def l2_normalize_pixels(t: np.ndarray, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Normalize every pixel vector along the channel axis (axis -3).

    Returns ``(normalized, degenerate)`` where ``degenerate`` flags pixels whose
    norm is ``<= eps``; those pixels are left as zero vectors and must be
    excluded by the caller.
    """
    t = np.asarray(t, dtype=DTYPE)
    norm = np.sqrt(np.sum(t * t, axis=-3))
    degenerate = norm <= eps
    safe = np.where(degenerate, 1.0, norm)
    out = t / np.expand_dims(safe, -3)
    out = np.where(np.expand_dims(degenerate, -3), 0.0, out)
    return out, degenerate


def softmax_over_set(logits: np.ndarray, index_set=None) -> np.ndarray:
    """Softmax of a 1-D logit vector restricted to ``index_set``.

    Entries outside the set get probability zero. Uses max-logit subtraction.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if index_set is None:
        idx = np.arange(logits.shape[0])
    else:
        idx = np.asarray(sorted(index_set), dtype=np.int64)
    if idx.size == 0:
        raise DimensionError("softmax over an empty index set")
    sub = logits[idx]
    e = np.exp(sub - sub.max())
    out = np.zeros_like(logits)
    out[idx] = e / e.sum()
    return out


def argmax_channel(t: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over axis -3; ties resolve to the smallest channel."""
    # np.argmax returns the first maximal index, which is the required tie rule
    return np.argmax(np.asarray(t), axis=-3)


class RngStream:
    """Seeded random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox bit generator. Substreams are derived
    with :meth:`child` so that independent consumers (per step, per view,
    per pixel) never share state.
    """

    def __init__(self, seed: int, stream_id: str = "sampling", path: tuple[int, ...] = ()):
        if stream_id not in _STREAM_CODES:
            raise ValueError(f"unknown stream id {stream_id!r}; expected one of {sorted(_STREAM_CODES)}")
        self.seed = int(seed)
        self.stream_id = stream_id
        self.path = tuple(int(p) for p in path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, _STREAM_CODES[stream_id], *self.path]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(keys))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r}, path={self.path})"
