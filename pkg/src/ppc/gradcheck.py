"""Finite-difference verification of every loss term on a small seeded instance.

Two levels are checked. The module level differentiates each loss with
respect to its own inputs (pixel embeddings for the contrast terms, features
and CAM weights for classification). The network level pushes the same
losses through the projector, CAM head and encoder and perturbs the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrast import ContrastConfig, Selection, embedding_objective, fd_check, single_term_config, total_contrast_loss
from .model import ModelParams, encoder_forward
from .objective import ObjectiveConfig, classification_objective, step, target_images
from .tensor import RngStream
from .views import SpatialTransform, ViewPair, build_view_pair

TERMS = ("cls", "cp", "cc", "intra")
TOLERANCE = 1e-6
_PATH = 7  # substream key reserved for gradient checks


@dataclass
class Instance:
    params: ModelParams
    images: np.ndarray
    tags: np.ndarray
    transform: SpatialTransform
    contrast: ContrastConfig
    pair: ViewPair
    selection: Selection
    seed: int


def build_instance(seed: int = 0, batch: int = 2, num_classes: int = 3, size: int = 8,
                   feat_dim: int = 32, proj_dim: int = 128, rescale: float = 0.5,
                   k: int = 4, n_per_class: int = 4, theta_bg: float = 0.3) -> Instance:
    """Random images and weights with every discrete choice frozen."""
    gen = RngStream(seed, "data-gen", (_PATH,)).generator
    images = gen.random((batch, 3, size, size))
    tags = gen.random((batch, num_classes)) < 0.5
    tags[np.arange(batch), gen.integers(0, num_classes, batch)] = True
    params = ModelParams.init(num_classes, feat_dim=feat_dim, proj_dim=proj_dim, seed=seed)
    tr = SpatialTransform(rescale=rescale)
    f_s, _ = encoder_forward(params, images)
    f_t, _ = encoder_forward(params, target_images(images, tr))
    pair = build_view_pair(f_s, f_t, tr, params.cam_w, params.proj_w, tags, theta_bg)
    cfg = ContrastConfig(k=k, n_per_class=n_per_class)
    _, sel, _ = total_contrast_loss(pair, cfg, RngStream(seed, "sampling", (_PATH,)))
    return Instance(params, images, tags, tr, cfg, pair, sel, seed)


def term_objective(inst: Instance, term: str):
    """Module-level ``(loss_fn, grads, params)`` for one loss term."""
    if term == "cls":
        return classification_objective(_raw_features(inst, "source"),
                                        _raw_features(inst, "target"), inst.params.cam_w, inst.tags)
    return embedding_objective(inst.pair, inst.selection, single_term_config(inst.contrast, term))


def _raw_features(inst: Instance, view: str):
    images = inst.images if view == "source" else target_images(inst.images, inst.transform)
    return encoder_forward(inst.params, images)[0]


def _network_config(inst: Instance, term: str) -> ObjectiveConfig:
    if term == "cls":
        contrast = ContrastConfig(use_cp=False, use_cc=False, use_intra=False, k=inst.contrast.k,
                                  n_per_class=inst.contrast.n_per_class)
    else:
        contrast = single_term_config(inst.contrast, term)
    return ObjectiveConfig(contrast=contrast, transform=inst.transform, use_cls=term == "cls")


def network_objective(inst: Instance, term: str):
    """Network-level ``(loss_fn, grads, params, signature_fn)`` for one loss term."""
    cfg = _network_config(inst, term)
    sel = inst.selection

    def run(p, need_grad=False):
        return step(ModelParams.from_dict(p), inst.images, inst.tags, cfg, selection=sel, need_grad=need_grad)

    params = {k: v.copy() for k, v in inst.params.as_dict().items()}
    grads = run(params, need_grad=True).grads
    return (lambda p: run(p).components), grads, params, (lambda p: run(p).signature)


def check_term(inst: Instance, term: str, h: float = 1e-5, n_coords: int = 200,
               network: bool = False, corrupt: bool = False) -> dict:
    """Run :func:`fd_check` on one term; ``corrupt`` scales the analytic gradient by 1.01."""
    sig = None
    if network:
        loss_fn, grads, params, sig = network_objective(inst, term)
    else:
        loss_fn, grads, params = term_objective(inst, term)
    if corrupt:
        grads = {k: 1.01 * np.asarray(g) for k, g in grads.items()}
    rng = RngStream(inst.seed, "sampling", (_PATH, TERMS.index(term), int(network))).generator
    details = fd_check(loss_fn, grads, params, h=h, n_coords=n_coords, rng=rng, signature_fn=sig, return_details=True)
    details["term"] = term
    details["passed"] = details["max_rel_error"] <= TOLERANCE
    return details
