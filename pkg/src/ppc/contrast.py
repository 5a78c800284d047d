"""Pixel-to-prototype contrastive losses and their analytic gradients.

All discrete choices of one step (pseudo labels, usable-pixel masks, top-K
prototype members and weights, mined negatives, sampled pixels) live in a
:class:`Selection`. Loss values are smooth functions of the embeddings once
a selection is fixed, which is what makes finite-difference checks possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .prototypes import (
    DEFAULT_K,
    DEFAULT_N_PER_CLASS,
    HARD_FRACTION,
    PICK_FRACTION,
    PrototypeSet,
    TopKSelection,
    estimate_prototypes,
    mine_negatives,
    prototype_backward,
    sample_pixels_per_class,
    select_topk,
)
from .tensor import DTYPE, RngStream
from .views import ViewPair

VIEWS = ("source", "target")
OTHER = {"source": "target", "target": "source"}


@dataclass
class ContrastConfig:
    tau: float = 0.1
    alpha: float = 0.1
    beta: float = 0.1
    k: int = DEFAULT_K
    n_per_class: int = DEFAULT_N_PER_CLASS
    hard_frac: float = HARD_FRACTION
    pick_frac: float = PICK_FRACTION
    use_cp: bool = True
    use_cc: bool = True
    use_intra: bool = True
    mining: bool = True
    sampling: bool = True
    detach_other: bool = False
    pool: str = "per_view"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.pool not in ("per_view", "joint"):
            raise ValueError("pool must be 'per_view' or 'joint'")


@dataclass
class LossReport:
    """Loss values of one step.

    ``l_cross`` sums the enabled cross-view terms and ``l_contrast`` is
    ``alpha * l_cross + beta * l_intra`` (``l_intra`` counted only when
    enabled). Disabled terms are still measured and reported.
    """

    l_cp: float = 0.0
    l_cc: float = 0.0
    l_cross: float = 0.0
    l_intra: float = 0.0
    l_contrast: float = 0.0
    l_cls: float = 0.0
    counts: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    components: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class Selection:
    """Frozen discrete state of one step, keyed by view name."""

    labels: dict                 # view -> (N,) pseudo labels
    include: dict                # view -> (N,) usable pixels (valid, non-degenerate)
    groups: list                 # [(views tuple, TopKSelection)] prototype pools
    negatives: dict = field(default_factory=dict)   # view -> (N, L) mask or None
    sampled: dict = field(default_factory=dict)     # view -> flat indices or None


@dataclass
class Term:
    value: float
    count: int
    skipped: int
    grad_v: dict = field(default_factory=dict)   # view -> (N, P)
    grad_p: dict = field(default_factory=dict)   # view -> (L, P)
    parts: list = field(default_factory=list)    # per-pixel contributions summing to value


def pixel_proto_nce(v, y: int, prototypes, tau: float = 0.1, subset=None) -> float:
    """Contrastive loss of one embedding against a prototype set.

    ``prototypes`` is an ``(L, P)`` array (or a :class:`PrototypeSet`, whose
    absent rows are ignored). ``subset`` restricts the denominator to the
    given label indices and must contain ``y``. Returns ``nan`` when the
    positive prototype is unavailable so callers can skip the pixel.
    """
    if isinstance(prototypes, PrototypeSet):
        avail = set(np.flatnonzero(prototypes.present).tolist())
        prototypes = prototypes.vectors
    else:
        prototypes = np.asarray(prototypes, dtype=DTYPE)
        avail = set(range(prototypes.shape[0]))
    idx = avail if subset is None else avail & set(int(s) for s in subset)
    if y not in idx:
        return math.nan
    idx = np.array(sorted(idx))
    logits = prototypes[idx] @ np.asarray(v, dtype=DTYPE) / tau
    mx = logits.max()
    lse = mx + math.log(np.exp(logits - mx).sum())
    return float(lse - logits[np.searchsorted(idx, y)])


def nce_grad_v(v, y: int, prototypes, tau: float = 0.1) -> np.ndarray:
    """``dF/dv = (1/tau) sum_c (softmax_c - [c == y]) p_c`` for a full prototype array."""
    prototypes = np.asarray(prototypes, dtype=DTYPE)
    logits = prototypes @ np.asarray(v, dtype=DTYPE) / tau
    s = np.exp(logits - logits.max())
    s /= s.sum()
    s[y] -= 1.0
    return s @ prototypes / tau


def _mean_nce(v_flat, labels, include, protos: PrototypeSet, tau, subset=None, need_grad=True):
    """Mean contrastive loss over included pixels whose positive prototype exists."""
    ok = include & protos.present[labels]
    rows = np.flatnonzero(ok)
    skipped = int(include.sum() - rows.size)
    if rows.size == 0:
        return 0.0, 0, skipped, None, None, np.zeros(0)
    vr = v_flat[rows]
    yr = labels[rows]
    # logits relative to the positive, formed from prototype differences so
    # the O(1/tau) common part never enters the rounding
    diff = protos.vectors[None, :, :] - protos.vectors[yr][:, None, :]
    rel = np.einsum("np,nlp->nl", vr, diff) / tau
    allowed = np.broadcast_to(protos.present, rel.shape) if subset is None else subset[rows] & protos.present
    masked = np.where(allowed, rel, -np.inf)
    n = rows.size
    ar = np.arange(n)
    # the positive's relative logit is exactly 0, so the loss is
    # softplus(logsumexp over negatives), which keeps small losses accurate
    negs = masked.copy()
    negs[ar, yr] = -np.inf
    mo = negs.max(axis=1)
    has_neg = np.isfinite(mo)
    shift = np.where(has_neg, mo, 0.0)
    with np.errstate(divide="ignore"):
        lse_neg = shift + np.log(np.exp(negs - shift[:, None]).sum(axis=1))
    parts = np.logaddexp(0.0, lse_neg) / n
    value = float(parts.sum())
    if not need_grad:
        return value, n, skipped, None, None, parts
    mx = masked.max(axis=1)
    e = np.exp(masked - mx[:, None])
    g = e / e.sum(axis=1, keepdims=True)
    g[ar, yr] -= 1.0
    g /= n * tau
    dv = np.zeros_like(v_flat)
    dv[rows] = g @ protos.vectors
    dp = g.T @ vr
    return value, n, skipped, dv, dp, parts


def _flat(pair: ViewPair, view: str) -> np.ndarray:
    return getattr(pair, view).flat()


def _accumulate(term: Term, view, proto_view, part, detach=False):
    value, count, skipped, dv, dp, parts = part
    term.parts.append(parts)
    term.value += value
    term.count += count
    term.skipped += skipped
    if dv is not None:
        term.grad_v[view] = term.grad_v.get(view, 0.0) + dv
        if not detach:
            term.grad_p[proto_view] = term.grad_p.get(proto_view, 0.0) + dp


def cross_prototype_loss(pair: ViewPair, sel: Selection, protos: dict, cfg: ContrastConfig, need_grad=False) -> Term:
    """Each view's pixels against the other view's prototypes, summed over both views."""
    term = Term(0.0, 0, 0)
    for view in VIEWS:
        other = OTHER[view]
        part = _mean_nce(_flat(pair, view), sel.labels[view], sel.include[view], protos[other], cfg.tau,
                         need_grad=need_grad)
        _accumulate(term, view, other, part, detach=cfg.detach_other)
    return term


def cross_cam_loss(pair: ViewPair, sel: Selection, protos: dict, cfg: ContrastConfig, need_grad=False) -> Term:
    """Each view's own prototypes with pseudo labels borrowed from the other view."""
    term = Term(0.0, 0, 0)
    for view in VIEWS:
        part = _mean_nce(_flat(pair, view), sel.labels[OTHER[view]], sel.include[view], protos[view], cfg.tau,
                         need_grad=need_grad)
        _accumulate(term, view, view, part)
    return term


def intra_view_loss(pair: ViewPair, sel: Selection, protos: dict, cfg: ContrastConfig, need_grad=False) -> Term:
    """Own labels and own prototypes, over sampled pixels and mined negatives when enabled."""
    term = Term(0.0, 0, 0)
    for view in VIEWS:
        include = sel.include[view]
        sampled = sel.sampled.get(view) if cfg.sampling else None
        if sampled is not None:
            keep = np.zeros_like(include)
            keep[sampled] = True
            include = include & keep
        subset = sel.negatives.get(view) if cfg.mining else None
        part = _mean_nce(_flat(pair, view), sel.labels[view], include, protos[view], cfg.tau, subset, need_grad)
        _accumulate(term, view, view, part)
    return term


def make_selection(pair: ViewPair, cfg: ContrastConfig, rng: RngStream | None = None) -> Selection:
    """Freeze labels, prototype pools, mined negatives and sampled pixels for one step."""
    labels = {v: getattr(pair, v).labels.ravel() for v in VIEWS}
    include = {v: getattr(pair, v).usable.ravel() for v in VIEWS}
    if cfg.pool == "per_view":
        groups = [((v,), select_topk(getattr(pair, v).confidence(), getattr(pair, v).labels,
                                     getattr(pair, v).usable, cfg.k)) for v in VIEWS]
    else:
        conf = np.concatenate([getattr(pair, v).confidence() for v in VIEWS])
        lab = np.concatenate([getattr(pair, v).labels for v in VIEWS])
        use = np.concatenate([getattr(pair, v).usable for v in VIEWS])
        groups = [(VIEWS, select_topk(conf, lab, use, cfg.k))]
    sel = Selection(labels, include, groups)
    if not (cfg.mining or cfg.sampling):
        return sel
    if rng is None:
        raise ValueError("mining or sampling requires an rng stream")
    protos = prototypes_for(pair, sel)
    for i, view in enumerate(VIEWS):
        v_flat = _flat(pair, view)
        if cfg.mining:
            sel.negatives[view] = mine_negatives(v_flat, labels[view], include[view], protos[view],
                                                 rng.child(i, 0), cfg.hard_frac, cfg.pick_frac)
        if cfg.sampling:
            sel.sampled[view] = sample_pixels_per_class(labels[view], include[view], v_flat, protos[view],
                                                        cfg.n_per_class, rng.child(i, 1))
    return sel


def prototypes_for(pair: ViewPair, sel: Selection) -> dict:
    protos = {}
    for views, topk in sel.groups:
        v_flat = np.concatenate([_flat(pair, v) for v in views])
        ps = estimate_prototypes(topk, v_flat)
        for v in views:
            protos[v] = ps
    return protos


def _prototype_grads_to_v(pair, sel, protos, grad_p) -> dict:
    out = {}
    for views, topk in sel.groups:
        parts = [grad_p[v] for v in views if v in grad_p]
        if not parts:
            continue
        g = sum(parts[1:], parts[0])
        sizes = [_flat(pair, v).shape[0] for v in views]
        dv = prototype_backward(topk, protos[views[0]], g, sum(sizes))
        for v, part in zip(views, np.split(dv, np.cumsum(sizes)[:-1])):
            out[v] = out.get(v, 0.0) + part
    return out


def total_contrast_loss(pair: ViewPair, cfg: ContrastConfig, rng: RngStream | None = None,
                        selection: Selection | None = None, need_grad: bool = False):
    """Evaluate all contrast terms; returns ``(LossReport, selection, grads)``.

    ``grads`` maps view name to ``d l_contrast / d v`` as ``(N, P)`` arrays
    (only when ``need_grad``), flowing through prototype averages as well.
    """
    sel = selection if selection is not None else make_selection(pair, cfg, rng)
    protos = prototypes_for(pair, sel)
    cp = cross_prototype_loss(pair, sel, protos, cfg, need_grad and cfg.use_cp)
    cc = cross_cam_loss(pair, sel, protos, cfg, need_grad and cfg.use_cc)
    intra = intra_view_loss(pair, sel, protos, cfg, need_grad and cfg.use_intra)
    l_cross = (cp.value if cfg.use_cp else 0.0) + (cc.value if cfg.use_cc else 0.0)
    l_intra_used = intra.value if cfg.use_intra else 0.0
    report = LossReport(
        l_cp=cp.value,
        l_cc=cc.value,
        l_cross=l_cross,
        l_intra=intra.value,
        l_contrast=cfg.alpha * l_cross + cfg.beta * l_intra_used,
        counts={"cp": cp.count, "cc": cc.count, "intra": intra.count},
        skipped={"cp": cp.skipped, "cc": cc.skipped, "intra": intra.skipped},
        components=np.concatenate([weight * p for term, weight, on in
                                   ((cp, cfg.alpha, cfg.use_cp), (cc, cfg.alpha, cfg.use_cc), (intra, cfg.beta, cfg.use_intra))
                                   if on for p in term.parts] or [np.zeros(0)]),
    )
    grads = None
    if need_grad:
        grad_v, grad_p = {}, {}
        for term, weight, on in ((cp, cfg.alpha, cfg.use_cp), (cc, cfg.alpha, cfg.use_cc), (intra, cfg.beta, cfg.use_intra)):
            if not on or weight == 0:
                continue
            for k, g in term.grad_v.items():
                grad_v[k] = grad_v.get(k, 0.0) + weight * g
            for k, g in term.grad_p.items():
                grad_p[k] = grad_p.get(k, 0.0) + weight * g
        for k, g in _prototype_grads_to_v(pair, sel, protos, grad_p).items():
            grad_v[k] = grad_v.get(k, 0.0) + g
        grads = {v: (grad_v[v] if v in grad_v else np.zeros_like(_flat(pair, v))) for v in VIEWS}
    return report, sel, grads


def _stencil_difference(fp, fm) -> float:
    if np.ndim(fp) == 0:
        return float(fp) - float(fm)
    return math.fsum(np.asarray(fp, dtype=DTYPE) - np.asarray(fm, dtype=DTYPE))


def fd_check(loss_fn, grads: dict, params: dict, h: float = 1e-5, n_coords: int = 200,
             rng=None, signature_fn=None, return_details: bool = False):
    """Central-difference check of ``grads`` against ``loss_fn(params)``.

    ``params`` and ``grads`` map names to arrays of equal shape. At least
    ``n_coords`` coordinates are drawn at random across all parameters (each
    tensor gets a share). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``loss_fn`` may return an array of additive contributions instead of a
    scalar; the two stencil evaluations are then differenced term by term
    and summed exactly, which lowers the round-off floor of the estimate.

    When ``signature_fn`` is given, coordinates whose perturbation changes
    the signature (a non-differentiable point such as a ReLU switching
    inside the stencil) are replaced by fresh draws and counted as skipped.
    """
    gen = getattr(rng, "generator", rng) if rng is not None else np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    quota = np.maximum(np.minimum(sizes, 10), np.round(n_coords * sizes / sizes.sum()).astype(int))
    quota = np.minimum(quota, sizes)
    work = {k: np.array(params[k], dtype=DTYPE, copy=True) for k in names}
    base_sig = signature_fn(work) if signature_fn is not None else None
    worst, checked, skipped = 0.0, 0, 0
    rows = []
    for name, q in zip(names, quota):
        flat = work[name].reshape(-1)
        order = gen.permutation(flat.size)
        done = 0
        for idx in order:
            if done >= q:
                break
            old = flat[idx]
            flat[idx] = old + h
            fp = loss_fn(work)
            sp_ = signature_fn(work) if signature_fn is not None else None
            flat[idx] = old - h
            fm = loss_fn(work)
            sm_ = signature_fn(work) if signature_fn is not None else None
            flat[idx] = old
            if signature_fn is not None and (sp_ != base_sig or sm_ != base_sig):
                skipped += 1
                continue
            num = _stencil_difference(fp, fm) / (2 * h)
            ana = float(np.asarray(grads[name]).reshape(-1)[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            rows.append((name, int(idx), ana, num, rel))
            worst = max(worst, rel)
            done += 1
        checked += done
    if return_details:
        return {"max_rel_error": worst, "checked": checked, "skipped": skipped, "rows": rows}
    return worst


TERMS = ("cp", "cc", "intra")


def single_term_config(cfg: ContrastConfig, term: str) -> ContrastConfig:
    """Copy of ``cfg`` with only ``term`` enabled at unit weight."""
    if term not in TERMS:
        raise ValueError(f"unknown contrast term {term!r}")
    return replace(cfg, alpha=1.0, beta=1.0, use_cp=term == "cp", use_cc=term == "cc", use_intra=term == "intra")


def with_embeddings(pair: ViewPair, flats: dict) -> ViewPair:
    """Shallow copy of ``pair`` whose views carry the given ``(N, P)`` embeddings."""
    views = {}
    for view in VIEWS:
        data = getattr(pair, view)
        b, p, h, w = data.v.shape
        v = np.asarray(flats[view], dtype=DTYPE).reshape(b, h, w, p).transpose(0, 3, 1, 2)
        views[view] = replace(data, v=v)
    return replace(pair, **views)


def embedding_objective(pair: ViewPair, sel: Selection, cfg: ContrastConfig):
    """``(loss_fn, grads, params)`` of ``cfg``'s contrast loss as a function of the embeddings.

    ``loss_fn`` returns per-pixel contributions (see :func:`fd_check`).
    """
    params = {v: _flat(pair, v).copy() for v in VIEWS}

    def loss_fn(flats):
        report, _, _ = total_contrast_loss(with_embeddings(pair, flats), cfg, selection=sel)
        return report.components

    _, _, grads = total_contrast_loss(pair, cfg, selection=sel, need_grad=True)
    return loss_fn, grads, params
