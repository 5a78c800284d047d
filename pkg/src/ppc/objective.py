"""Full training objective of one batch: forward pass, losses and backprop.

The objective is the soft-margin classification loss (averaged over both
views) plus the weighted contrastive regularizer. Gradients flow into the
encoder, CAM head and projector; pseudo labels, top-K membership, CAM
weights, mined negatives and sampled pixels are constants of the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cam import DEFAULT_THETA_BG, class_scores_conv_gap, normalize_maps
from .contrast import VIEWS, ContrastConfig, LossReport, Selection, total_contrast_loss
from .model import ModelParams, encoder_backward, encoder_forward, relu_pattern, soft_margin_loss
from .tensor import DTYPE, RngStream
from .views import (
    OUTPUT_STRIDE,
    SpatialTransform,
    ViewPair,
    adjoint_transform,
    apply_transform,
    build_view_pair,
    target_extent,
)


@dataclass
class ObjectiveConfig:
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    transform: SpatialTransform = field(default_factory=lambda: SpatialTransform(rescale=128 / 448))
    theta_bg: float = DEFAULT_THETA_BG
    use_cls: bool = True
    conv_dtype: type = DTYPE

    @property
    def contrast_active(self) -> bool:
        c = self.contrast
        return (c.alpha > 0 and (c.use_cp or c.use_cc)) or (c.beta > 0 and c.use_intra)


@dataclass
class StepResult:
    loss: float
    report: LossReport
    selection: Selection
    grads: dict | None
    pair: ViewPair
    signature: bytes
    components: np.ndarray


def target_images(images, tr: SpatialTransform):
    hw = images.shape[-2:]
    out, _ = apply_transform(images, tr, "bilinear", target_extent(hw, tr, OUTPUT_STRIDE))
    return out


def _embedding_backward(view, dv_flat, proj_w):
    """Back through L2 normalization, ReLU and the projector 1x1 conv."""
    b, p, h, w = view.v.shape
    dv = dv_flat.reshape(b, h, w, p).transpose(0, 3, 1, 2)
    z = view.proj_pre
    norm = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
    norm = np.where(norm > 0, norm, 1.0)
    dz = (dv - view.v * np.sum(view.v * dv, axis=1, keepdims=True)) / norm
    da = dz * (z > 0)
    f = view.features
    d_proj = np.einsum("bphw,bdhw->pd", da, f)
    df = np.einsum("pd,bphw->bdhw", proj_w, da)
    return d_proj, df


def step(params: ModelParams, images, tags, cfg: ObjectiveConfig, rng: RngStream | None = None,
         selection: Selection | None = None, need_grad: bool = True) -> StepResult:
    """Evaluate the objective on a batch and (optionally) its exact gradient.

    ``tags`` is a ``(B, C)`` boolean array of image-level labels; it is the
    only supervision used. Pass a previous ``selection`` to replay its
    discrete choices.
    """
    images = np.asarray(images, dtype=DTYPE)
    tags = np.asarray(tags, dtype=bool)
    tr = cfg.transform
    t_img = target_images(images, tr)
    f_s, cache_s = encoder_forward(params, images, cfg.conv_dtype)
    f_t, cache_t = encoder_forward(params, t_img, cfg.conv_dtype)

    scores = {"source": class_scores_conv_gap(f_s, params.cam_w), "target": class_scores_conv_gap(f_t, params.cam_w)}
    cls_parts = {v: soft_margin_loss(scores[v], tags) for v in VIEWS}
    l_cls = 0.5 * (cls_parts["source"][0] + cls_parts["target"][0])

    pair = build_view_pair(f_s, f_t, tr, params.cam_w, params.proj_w, tags, cfg.theta_bg)
    want_contrast_grad = need_grad and cfg.contrast_active
    report, sel, grad_v = total_contrast_loss(pair, cfg.contrast, rng, selection, need_grad=want_contrast_grad)
    report.l_cls = l_cls
    loss = (l_cls if cfg.use_cls else 0.0) + report.l_contrast
    cls_terms = [0.5 * np.logaddexp(0.0, -np.where(tags, 1.0, -1.0) * scores[v]).ravel() / tags.size for v in VIEWS]
    components = np.concatenate((cls_terms if cfg.use_cls else []) + [report.components])
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} (cls={l_cls}, contrast={report.l_contrast})")

    signature = relu_pattern(cache_s) + relu_pattern(cache_t) + b"".join(
        np.packbits(getattr(pair, v).proj_pre > 0).tobytes() for v in VIEWS)

    grads = None
    if need_grad:
        grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        df = {"source": np.zeros_like(f_s), "target": np.zeros_like(f_t)}
        feats = {"source": f_s, "target": f_t}
        if cfg.use_cls:
            for v in VIEWS:
                ds = 0.5 * cls_parts[v][1]
                f = feats[v]
                grads["cam_w"] += ds.T @ f.mean(axis=(2, 3))
                df[v] += (ds @ params.cam_w)[:, :, None, None] / (f.shape[2] * f.shape[3])
        if want_contrast_grad:
            d_proj, df_a = _embedding_backward(pair.source, grad_v["source"], params.proj_w)
            grads["proj_w"] += d_proj
            df["source"] += adjoint_transform(df_a, tr, f_s.shape[-2:], scale=OUTPUT_STRIDE)
            d_proj, df_tt = _embedding_backward(pair.target, grad_v["target"], params.proj_w)
            grads["proj_w"] += d_proj
            df["target"] += df_tt
        for v, cache in (("source", cache_s), ("target", cache_t)):
            for k, g in encoder_backward(params, cache, df[v]).items():
                grads[k] += g
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
    return StepResult(loss, report, sel, grads, pair, signature, components)


def classification_objective(f_source, f_target, cam_w, tags):
    """``(loss_fn, grads, params)`` of the two-view classification loss over features and CAM weights.

    ``loss_fn`` returns the per-(view, image, class) contributions.
    """
    tags = np.asarray(tags, dtype=bool)
    sign = np.where(tags, 1.0, -1.0)
    params = {"cam_w": np.array(cam_w, dtype=DTYPE), "f_source": np.array(f_source, dtype=DTYPE),
              "f_target": np.array(f_target, dtype=DTYPE)}

    def loss_fn(p):
        return np.concatenate([0.5 * np.logaddexp(0.0, -sign * class_scores_conv_gap(p[k], p["cam_w"])).ravel() / tags.size
                               for k in ("f_source", "f_target")])

    grads = {"cam_w": np.zeros_like(params["cam_w"])}
    for k in ("f_source", "f_target"):
        f = params[k]
        ds = 0.5 * soft_margin_loss(class_scores_conv_gap(f, params["cam_w"]), tags)[1]
        grads["cam_w"] += ds.T @ f.mean(axis=(2, 3))
        grads[k] = np.broadcast_to((ds @ params["cam_w"])[:, :, None, None] / (f.shape[2] * f.shape[3]), f.shape).copy()
    return loss_fn, grads, params


def analytic_gradients(params: ModelParams, images, tags, cfg: ObjectiveConfig, selection: Selection) -> dict:
    """Exact gradient of the objective with all discrete choices taken from ``selection``."""
    return step(params, images, tags, cfg, selection=selection, need_grad=True).grads


def predict_cams(params: ModelParams, images, tags, chunk: int = 16, conv_dtype=DTYPE) -> np.ndarray:
    """Normalized CAMs upsampled to image resolution, ``(B, C, H, W)``.

    ``tags`` masks absent classes, as in seed evaluation on tagged images.
    """
    images = np.asarray(images, dtype=DTYPE)
    tags = np.asarray(tags, dtype=bool)
    hw = images.shape[-2:]
    out = []
    up = SpatialTransform()
    for i in range(0, images.shape[0], chunk):
        f, _ = encoder_forward(params, images[i:i + chunk], conv_dtype)
        cams = np.maximum(np.einsum("cd,bdhw->bchw", params.cam_w, f), 0.0)
        cams, _ = apply_transform(cams, up, "bilinear", hw)
        cams *= tags[i:i + chunk, :, None, None]
        out.append(normalize_maps(cams))
    return np.concatenate(out) if out else np.zeros((0, params.num_classes) + hw)
