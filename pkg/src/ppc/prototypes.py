"""Pixel projections, class prototypes and hard-example selection.

Pixels of one view are addressed by a flat index into ``(image, h, w)``
order, so index order is also the lexicographic tie-break order. Label 0 is
background and owns a prototype like every foreground class.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import DTYPE, channel_matmul, l2_normalize_pixels

PROJ_DIM = 128
DEFAULT_K = 32
DEFAULT_N_PER_CLASS = 16
HARD_FRACTION = 0.6
PICK_FRACTION = 0.5


@dataclass
class Projection:
    v: np.ndarray           # (..., P, H, W) unit vectors
    degenerate: np.ndarray  # (..., H, W)


def project(f, proj_w) -> Projection:
    """1x1 conv, ReLU, then per-pixel L2 normalization."""
    z = np.maximum(channel_matmul(f, proj_w), 0.0)
    v, degenerate = l2_normalize_pixels(z)
    return Projection(v, degenerate)


@dataclass
class TopKSelection:
    """Per-label pixel references and their confidence weights.

    ``indices[c]`` are flat pixel indices (sorted by descending weight),
    ``weights[c]`` the matching CAM confidences.
    """

    indices: list
    weights: list
    k: int

    @property
    def num_labels(self) -> int:
        return len(self.indices)


def select_topk(confidence, labels, valid, k: int = DEFAULT_K) -> TopKSelection:
    """Pick, per label, the ``k`` most confident valid pixels across the whole batch.

    ``confidence`` is ``(B, L, h, w)``; ``labels`` and ``valid`` are
    ``(B, h, w)``. Only pixels whose pseudo label is ``c`` and whose weight is
    positive compete for label ``c``. Ties keep ``(image, h, w)`` order.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    confidence = np.asarray(confidence, dtype=DTYPE)
    num_labels = confidence.shape[1]
    lab = np.asarray(labels).ravel()
    ok = np.asarray(valid, dtype=bool).ravel()
    conf = confidence.transpose(0, 2, 3, 1).reshape(-1, num_labels)
    indices, weights = [], []
    for c in range(num_labels):
        cand = np.flatnonzero(ok & (lab == c))
        wc = conf[cand, c]
        keep = wc > 0
        cand, wc = cand[keep], wc[keep]
        order = np.argsort(-wc, kind="stable")[:k]
        indices.append(cand[order])
        weights.append(wc[order])
    return TopKSelection(indices, weights, k)


@dataclass
class PrototypeSet:
    vectors: np.ndarray   # (L, P), zero rows for absent labels
    present: np.ndarray   # (L,) bool
    raw: np.ndarray       # (L, P) weighted means before normalization
    norms: np.ndarray     # (L,)


def estimate_prototypes(sel: TopKSelection, v_flat) -> PrototypeSet:
    """Confidence-weighted mean of the selected embeddings, then L2-normalized."""
    v_flat = np.asarray(v_flat, dtype=DTYPE)
    num_labels, dim = sel.num_labels, v_flat.shape[1]
    raw = np.zeros((num_labels, dim))
    norms = np.zeros(num_labels)
    present = np.zeros(num_labels, dtype=bool)
    for c in range(num_labels):
        wc = sel.weights[c]
        total = wc.sum()
        if len(wc) == 0 or total <= 0:
            continue
        raw[c] = (wc / total) @ v_flat[sel.indices[c]]
        norms[c] = np.sqrt(raw[c] @ raw[c])
        present[c] = norms[c] > 0
    vectors = np.zeros_like(raw)
    vectors[present] = raw[present] / norms[present, None]
    return PrototypeSet(vectors, present, raw, norms)


def prototype_backward(sel: TopKSelection, protos: PrototypeSet, grad_vectors, num_pixels: int) -> np.ndarray:
    """Push prototype gradients back onto the ``(N, P)`` embeddings they average.

    Selection membership and weights are constants.
    """
    grad_vectors = np.asarray(grad_vectors, dtype=DTYPE)
    dv = np.zeros((num_pixels, grad_vectors.shape[1]))
    for c in np.flatnonzero(protos.present):
        g = grad_vectors[c]
        if not g.any():
            continue
        p = protos.vectors[c]
        du = (g - p * (p @ g)) / protos.norms[c]
        wc = sel.weights[c] / sel.weights[c].sum()
        np.add.at(dv, sel.indices[c], wc[:, None] * du[None, :])
    return dv


def fraction_count(n: int, frac: float) -> int:
    """``max(1, round_half_up(frac * n))`` evaluated in exact arithmetic."""
    x = Fraction(str(frac)) * n
    return max(1, int(x + Fraction(1, 2)))


def _rank_hardest(dots, candidates):
    # descending similarity, ties toward the smaller label
    order = np.lexsort((candidates, -dots[candidates]))
    return candidates[order]


def semi_hard_negatives(v, y: int, protos: PrototypeSet, rng, hard_frac=HARD_FRACTION, pick_frac=PICK_FRACTION):
    """Random ``pick_frac`` share of the ``hard_frac`` most similar negative prototypes.

    Returns sorted label indices; empty when no negative prototype is present.
    ``rng`` is a ``numpy.random.Generator`` or an object with ``.generator``.
    """
    gen = getattr(rng, "generator", rng)
    keys = gen.random(protos.present.shape[0])
    return _mine_with_keys(np.asarray(v, dtype=DTYPE) @ protos.vectors.T, y, protos.present, keys, hard_frac, pick_frac)


def _mine_with_keys(dots, y, present, keys, hard_frac, pick_frac):
    negs = np.flatnonzero(present)
    negs = negs[negs != y]
    if negs.size == 0:
        return negs
    n1 = fraction_count(negs.size, hard_frac)
    n2 = fraction_count(n1, pick_frac)
    hardest = _rank_hardest(dots, negs)[:n1]
    chosen = hardest[np.argsort(keys[hardest], kind="stable")[:n2]]
    return np.sort(chosen)


def mine_negatives(v_flat, labels_flat, include, protos: PrototypeSet, rng,
                   hard_frac=HARD_FRACTION, pick_frac=PICK_FRACTION) -> np.ndarray:
    """Per-pixel prototype subsets as an ``(N, L)`` mask: positive plus mined negatives.

    Rows for pixels outside ``include`` are all False. One vector of random
    keys per pixel is drawn in pixel order, so a pixel's choice matches
    :func:`semi_hard_negatives` fed the same keys.
    """
    gen = getattr(rng, "generator", rng)
    n = v_flat.shape[0]
    num_labels = protos.present.shape[0]
    keys = gen.random((n, num_labels))
    dots = v_flat @ protos.vectors.T
    mask = np.zeros((n, num_labels), dtype=bool)
    present = protos.present
    for y in np.unique(labels_flat[include]):
        rows = np.flatnonzero(include & (labels_flat == y))
        mask[rows, y] = True
        negs = np.flatnonzero(present)
        negs = negs[negs != y]
        if negs.size == 0:
            continue
        n1 = fraction_count(negs.size, hard_frac)
        n2 = fraction_count(n1, pick_frac)
        d = dots[np.ix_(rows, negs)]
        # stable sort on -d keeps smaller labels first among ties
        hard = negs[np.argsort(-d, axis=1, kind="stable")[:, :n1]]
        k = np.take_along_axis(keys[rows], hard, axis=1)
        pick = np.take_along_axis(hard, np.argsort(k, axis=1, kind="stable")[:, :n2], axis=1)
        mask[rows[:, None], pick] = True
    return mask


def sample_pixels_per_class(labels_flat, include, v_flat, protos: PrototypeSet, n_per_class: int, rng) -> np.ndarray:
    """Half hardest (least similar to own prototype), half random pixels per class.

    Classes with at most ``n_per_class`` usable pixels contribute all of
    them. Returns sorted flat pixel indices.
    """
    if n_per_class < 2 or n_per_class % 2:
        raise ValueError("n_per_class must be an even number >= 2")
    gen = getattr(rng, "generator", rng)
    labels_flat = np.asarray(labels_flat)
    chosen = []
    for c in np.flatnonzero(protos.present):
        pix = np.flatnonzero(include & (labels_flat == c))
        if pix.size <= n_per_class:
            chosen.append(pix)
            continue
        half = n_per_class // 2
        dots = v_flat[pix] @ protos.vectors[c]
        order = np.argsort(dots, kind="stable")
        hard = pix[order[:half]]
        rest = pix[order[half:]]
        rand = gen.choice(rest, size=half, replace=False)
        chosen.append(np.concatenate([hard, rand]))
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))
