"""Training loop, seed evaluation and the ablation driver."""

from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .cam import DEFAULT_THETA_BG, CamStack, seed_sweep
from .contrast import ContrastConfig
from .data import Dataset, Split
from .model import ModelParams
from .objective import ObjectiveConfig, predict_cams, step
from .prototypes import DEFAULT_K, DEFAULT_N_PER_CLASS, PROJ_DIM
from .tensor import RngStream
from .views import DEFAULT_RESCALE, SpatialTransform

METRIC_COLUMNS = ("epoch", "l_cls", "l_cp", "l_cc", "l_intra", "l_contrast", "seed_miou", "best_theta")
DEFAULT_THRESHOLDS = tuple(round(0.1 + 0.05 * i, 2) for i in range(17))


# arithmetic of the encoder convolutions; losses, views and updates stay 64-bit
PRECISIONS = {"float32": np.float32, "float64": np.float64}


LR_SCHEDULES = ("poly", "constant")
POLY_POWER = 0.9


def learning_rate(base: float, schedule: str, it: int, total: int) -> float:
    """Step size of iteration ``it`` (0-based) out of ``total``."""
    if schedule == "constant":
        return base
    return base * (1.0 - it / total) ** POLY_POWER


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    theta_bg: float = DEFAULT_THETA_BG
    feat_dim: int = 32
    proj_dim: int = PROJ_DIM
    use_cls: bool = True
    use_cp: bool = True
    use_cc: bool = True
    use_intra: bool = True
    mining: bool = True
    sampling: bool = True
    tau: float = 0.1
    alpha: float = 0.1
    beta: float = 0.1
    k: int = DEFAULT_K
    n_per_class: int = DEFAULT_N_PER_CLASS
    pool: str = "per_view"
    detach_other: bool = False
    transform: str = "rescale"
    rescale_factor: float = DEFAULT_RESCALE
    rotate_deg: float = 10.0
    translate_px: tuple = (8.0, 0.0)
    thresholds: tuple = DEFAULT_THRESHOLDS
    warmup_epochs: int = 10
    precision: str = "float32"
    lr_schedule: str = "poly"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so top-K pools span several images")
        if self.epochs < 0 or not self.lr > 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0 and lr > 0")
        if not self.thresholds or any(not 0 < t < 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        self.contrast  # validates tau, alpha, beta, pool
        self.spatial_transform

    @property
    def contrast(self) -> ContrastConfig:
        return ContrastConfig(tau=self.tau, alpha=self.alpha, beta=self.beta, k=self.k, n_per_class=self.n_per_class,
                              use_cp=self.use_cp, use_cc=self.use_cc, use_intra=self.use_intra, mining=self.mining,
                              sampling=self.sampling, detach_other=self.detach_other, pool=self.pool)

    @property
    def spatial_transform(self) -> SpatialTransform:
        return SpatialTransform.from_names(self.transform, self.rescale_factor, self.rotate_deg, tuple(self.translate_px))

    @property
    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(contrast=self.contrast, transform=self.spatial_transform,
                               theta_bg=self.theta_bg, use_cls=self.use_cls, conv_dtype=PRECISIONS[self.precision])

    def as_dict(self) -> dict:
        return asdict(self)


CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list
    config: TrainConfig

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)

    @property
    def final_miou(self) -> float:
        return self.metrics[-1]["seed_miou"] if self.metrics else math.nan


def metrics_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def evaluate_seeds(params: ModelParams, split: Split, thresholds=DEFAULT_THRESHOLDS, conv_dtype=np.float64):
    """Best-threshold seed mIoU of ``params`` on ``split``; returns ``(miou, theta, curve)``."""
    cams = predict_cams(params, split.images, split.tags, conv_dtype=conv_dtype)
    stacks = [CamStack(maps=c, tags=frozenset((np.flatnonzero(t) + 1).tolist())) for c, t in zip(cams, split.tags)]
    theta, curve = seed_sweep(stacks, list(split.masks), thresholds)
    return max(curve), theta, curve


def _batches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    """Plain SGD on classification plus the enabled contrast terms.

    Only images and tags of the train split reach the loss; masks of the
    eval split are read for the per-epoch seed evaluation.
    """
    tr = dataset.train
    if len(tr) < 2:
        raise ValueError("training split needs at least two images")
    params = ModelParams.init(dataset.num_classes, feat_dim=config.feat_dim, proj_dim=config.proj_dim, seed=config.seed)
    obj = config.objective
    # contrast terms are still measured during warm-up but carry no weight
    warm = replace(obj, contrast=replace(obj.contrast, alpha=0.0, beta=0.0))
    root = RngStream(config.seed, "sampling")
    metrics = []
    per_epoch = max(1, math.ceil(len(tr) / config.batch_size))
    total_steps = per_epoch * config.epochs
    it = 0
    for epoch in range(1, config.epochs + 1):
        sums = dict.fromkeys(METRIC_COLUMNS[1:6], 0.0)
        batches = _batches(len(tr), config.batch_size, root.child(0, epoch).generator)
        for b, idx in enumerate(batches):
            idx = np.sort(idx)
            cfg = warm if epoch <= config.warmup_epochs else obj
            res = step(params, tr.images[idx], tr.tags[idx], cfg, rng=root.child(1, epoch, b))
            rep = res.report
            for key, val in (("l_cls", rep.l_cls), ("l_cp", rep.l_cp), ("l_cc", rep.l_cc),
                             ("l_intra", rep.l_intra), ("l_contrast", rep.l_contrast)):
                sums[key] += val
            lr = learning_rate(config.lr, config.lr_schedule, it, total_steps)
            it += 1
            for name, g in res.grads.items():
                p = getattr(params, name)
                p -= lr * g
                if not np.all(np.isfinite(p)):
                    raise TrainingDiverged(f"parameter {name} became non-finite at epoch {epoch}, batch {b}")
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        if len(dataset.eval):
            row["seed_miou"], row["best_theta"], _ = evaluate_seeds(params, dataset.eval, config.thresholds, obj.conv_dtype)
        else:
            row["seed_miou"], row["best_theta"] = math.nan, math.nan
        metrics.append(row)
        if log is not None:
            log(row)
    return TrainResult(params, metrics, config)


ABLATION_LADDER = (
    ("baseline", dict(use_cp=False, use_cc=False, use_intra=False, mining=False, sampling=False)),
    ("+cross-prototype", dict(use_cp=True, use_cc=False, use_intra=False, mining=False, sampling=False)),
    ("+cross-cam", dict(use_cp=True, use_cc=True, use_intra=False, mining=False, sampling=False)),
    ("+intra-view", dict(use_cp=True, use_cc=True, use_intra=True, mining=False, sampling=False)),
    ("+semi-hard mining", dict(use_cp=True, use_cc=True, use_intra=True, mining=True, sampling=False)),
    ("+hard pixel sampling", dict(use_cp=True, use_cc=True, use_intra=True, mining=True, sampling=True)),
)
K_SWEEP = (4, 8, 16, 32, 64)
TRANSFORM_SWEEP = ("rescale", "rescale,hflip", "rescale,hflip,rotate", "rescale,hflip,rotate,translate")


@dataclass
class AblationRow:
    group: str
    name: str
    scores: list

    @property
    def median(self) -> float:
        return statistics.median(self.scores)

    @property
    def spread(self) -> tuple:
        return min(self.scores), max(self.scores)


def final_score(dataset: Dataset, config: TrainConfig) -> float:
    """Final-epoch best-threshold seed mIoU of one training run."""
    res = train(dataset, config)
    return res.metrics[-1]["seed_miou"] if res.metrics else math.nan


def run_configs(dataset: Dataset, configs, jobs: int = 1) -> list:
    """:func:`final_score` of each config, in order; ``jobs > 1`` uses worker processes."""
    configs = list(configs)
    if jobs <= 1 or len(configs) <= 1:
        return [final_score(dataset, c) for c in configs]
    with ProcessPoolExecutor(max_workers=min(jobs, len(configs))) as pool:
        return list(pool.map(final_score, [dataset] * len(configs), configs))


def _run_seeds(dataset, config, seeds, overrides, log=None, jobs=1):
    scores = run_configs(dataset, [replace(config, seed=s, **overrides) for s in seeds], jobs)
    if log is not None:
        for s, score in zip(seeds, scores):
            log(overrides, s, score)
    return scores


def compare(dataset: Dataset, base: TrainConfig = TrainConfig(), seeds=(0, 1, 2, 3, 4), jobs: int = 1):
    """Final seed mIoUs of the classification-only baseline and the full method, per seed."""
    baseline = _run_seeds(dataset, base, seeds, dict(ABLATION_LADDER[0][1]), jobs=jobs)
    full = _run_seeds(dataset, base, seeds, dict(ABLATION_LADDER[-1][1]), jobs=jobs)
    return baseline, full


def ablate(dataset: Dataset, base: TrainConfig = TrainConfig(), seeds=(0, 1, 2, 3, 4),
           k_values=K_SWEEP, transforms=TRANSFORM_SWEEP, log=None, jobs: int = 1) -> list:
    """Ablation ladder, K sweep and transform sweep; each cell is a list of final-epoch seed mIoUs."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    rows = []
    for name, over in ABLATION_LADDER:
        rows.append(AblationRow("ladder", name, _run_seeds(dataset, base, seeds, over, log, jobs)))
    full = ABLATION_LADDER[-1][1]
    for k in k_values:
        rows.append(AblationRow("k", f"K={k}", _run_seeds(dataset, base, seeds, dict(full, k=k), log, jobs)))
    for names in transforms:
        rows.append(AblationRow("transform", names,
                                _run_seeds(dataset, base, seeds, dict(full, transform=names), log, jobs)))
    return rows


def ablation_table(rows) -> str:
    lines = ["group,setting,median_miou,min_miou,max_miou,n_seeds"]
    for r in rows:
        lo, hi = r.spread
        lines.append(f"{r.group},{r.name},{r.median:.4f},{lo:.4f},{hi:.4f},{len(r.scores)}")
    return "\n".join(lines) + "\n"
