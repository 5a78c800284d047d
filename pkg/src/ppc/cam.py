"""Classification scores, class activation maps, pseudo masks and seed sweeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evalkit import ConfusionMatrix, miou
from .tensor import DTYPE, DimensionError, channel_matmul, relu, spatial_mean

DEFAULT_THETA_BG = 0.3


@dataclass
class CamStack:
    """Non-negative class maps ``(C, H, W)``; channel ``c`` holds class ``c + 1``."""

    maps: np.ndarray
    tags: frozenset

    @property
    def num_classes(self) -> int:
        return self.maps.shape[0]


def _check_head(f: np.ndarray, w: np.ndarray) -> None:
    if w.ndim != 2 or f.ndim < 3 or w.shape[1] != f.shape[-3]:
        raise DimensionError(f"features {f.shape} incompatible with class weights {w.shape}")


def tag_vector(tags, num_classes: int) -> np.ndarray:
    """Boolean vector over classes ``1..C`` (index ``c - 1``)."""
    out = np.zeros(num_classes, dtype=bool)
    for c in tags:
        if not 1 <= c <= num_classes:
            raise ValueError(f"tag {c} outside 1..{num_classes}")
        out[c - 1] = True
    return out


def class_scores_gap_fc(f, w) -> np.ndarray:
    """Scores as ``(1/HW) sum_j w[c,j] sum_i f[j,i]``: pool first, then the FC layer."""
    f = np.asarray(f, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_head(f, w)
    hw = f.shape[-1] * f.shape[-2]
    pooled = f.reshape(f.shape[:-2] + (hw,)).sum(axis=-1)
    return np.matmul(pooled, w.T) / hw


def class_scores_conv_gap(f, w) -> np.ndarray:
    """Scores as GAP of the 1x1-conv output (pre-ReLU)."""
    f = np.asarray(f, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_head(f, w)
    return spatial_mean(channel_matmul(f, w))


def cam_from_head(f, w, tags) -> CamStack:
    f = np.asarray(f, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_head(f, w)
    maps = relu(channel_matmul(f, w))
    maps *= tag_vector(tags, w.shape[0])[:, None, None]
    return CamStack(maps=maps, tags=frozenset(tags))


def normalize_maps(maps: np.ndarray, valid=None) -> np.ndarray:
    """Divide each channel of ``(..., C, H, W)`` by its spatial max when positive."""
    maps = np.asarray(maps, dtype=DTYPE)
    src = maps if valid is None else maps * np.expand_dims(valid, -3)
    peak = src.reshape(maps.shape[:-2] + (-1,)).max(axis=-1)
    scale = np.where(peak > 0, peak, 1.0)
    return maps / scale[..., None, None]


def normalize_cams(cam: CamStack) -> CamStack:
    return CamStack(maps=normalize_maps(cam.maps), tags=cam.tags)


def pseudo_labels(norm_maps: np.ndarray, theta_bg: float) -> np.ndarray:
    """Argmax over ``[theta_bg, class maps...]``; the constant background wins ties."""
    shape = norm_maps.shape
    bg = np.full(shape[:-3] + (1,) + shape[-2:], theta_bg, dtype=DTYPE)
    return np.argmax(np.concatenate([bg, norm_maps], axis=-3), axis=-3)


def pseudo_mask(cam_norm: CamStack, theta_bg: float = DEFAULT_THETA_BG) -> np.ndarray:
    """Label grid over ``{0, 1..C}``; classes outside ``cam_norm.tags`` never win."""
    maps = cam_norm.maps * tag_vector(cam_norm.tags, cam_norm.num_classes)[:, None, None]
    return pseudo_labels(maps, theta_bg)


def seed_sweep(cams_norm, gt_masks, thresholds) -> tuple[float, list[float]]:
    """Sweep background thresholds over a batch of normalized CAMs.

    Returns the best threshold and the batch mIoU at every threshold, in order.
    """
    cams_norm = list(cams_norm)
    gt_masks = list(gt_masks)
    thresholds = [float(t) for t in thresholds]
    if not cams_norm:
        raise ValueError("empty batch")
    if len(cams_norm) != len(gt_masks):
        raise ValueError("number of CAM stacks and ground-truth masks differ")
    if not thresholds or any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError("thresholds must be a nonempty list of values in (0, 1)")
    num_labels = cams_norm[0].num_classes + 1
    curve = []
    for theta in thresholds:
        conf = ConfusionMatrix(num_labels)
        for cam, gt in zip(cams_norm, gt_masks):
            conf.accumulate(pseudo_mask(cam, theta), gt)
        curve.append(miou(conf)[1])
    best = int(np.argmax(curve))
    return thresholds[best], curve
