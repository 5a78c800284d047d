"""Command-line entry point: ``ppc {gen-data,train,eval-seeds,gradcheck,ablate}``.

Every option can also come from a flat ``key=value`` file passed with
``--config``; flags given on the command line win. Keys use the long
option name with dashes replaced by underscores. The report written by
``train`` and ``ablate`` is itself a valid config file.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .cam import CamStack, seed_sweep
from .gradcheck import TERMS, TOLERANCE, build_instance, check_term
from .model import ModelParams
from .objective import predict_cams
from .train import (
    K_SWEEP,
    TRANSFORM_SWEEP,
    TrainConfig,
    TrainingDiverged,
    ablate,
    ablation_table,
    metrics_to_csv,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_range(text: str) -> tuple:
    """``a:b:step`` inclusive of ``b`` (up to rounding), e.g. ``0.1:0.9:0.05``."""
    try:
        a, b, s = (float(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"expected start:stop:step, got {text!r}") from None
    if s <= 0 or b < a:
        raise ValueError(f"empty or invalid range {text!r}")
    n = int(np.floor((b - a) / s + 1e-9)) + 1
    return tuple(round(a + i * s, 10) for i in range(n))


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in str(text).split(","))


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in str(text).split(","))


def _names(text: str) -> tuple:
    return tuple(x for x in str(text).split(";") if x)


@dataclass(frozen=True)
class Option:
    name: str
    parse: object
    default: object
    help: str = ""
    flag: bool = False    # boolean with --name / --no-name forms


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and all(isinstance(v, str) for v in value):
            return ";".join(value)
        return ",".join(_fmt(v) for v in value)
    return str(value)


_TRAIN_HELP = {
    "lr": "SGD learning rate", "epochs": "training epochs", "batch_size": "images per batch (>= 2)",
    "seed": "seed of initialisation and sampling", "theta_bg": "background score for pseudo labels",
    "k": "top-K pixels per prototype", "n_per_class": "pixels sampled per class (even)",
    "transform": "comma list from rescale,hflip,rotate,translate", "warmup_epochs": "epochs before contrast terms start",
    "lr_schedule": "poly or constant", "precision": "arithmetic of the encoder convolutions (float32 or float64)",
}


def _train_options() -> list:
    out = []
    for f in fields(TrainConfig):
        default = f.default
        if f.name == "thresholds":
            out.append(Option("thresholds", parse_range, "0.1:0.9:0.05", "seed sweep range start:stop:step"))
        elif isinstance(default, bool):
            out.append(Option(f.name, parse_bool, default, _TRAIN_HELP.get(f.name, ""), flag=True))
        elif isinstance(default, tuple):
            out.append(Option(f.name, _floats, default, "comma separated numbers"))
        else:
            out.append(Option(f.name, type(default), default, _TRAIN_HELP.get(f.name, "")))
    return out


DATA_OPTIONS = [
    Option("seed", int, 0, "dataset seed"),
    Option("out", str, None, "output dataset file"),
    Option("classes", int, 5, "number of foreground classes"),
    Option("image_size", int, 64, "square image extent"),
    Option("min_blobs", int, 1, "fewest blobs per image"),
    Option("max_blobs", int, 3, "most blobs per image"),
    Option("n_train", int, 200, "training images"),
    Option("n_eval", int, 50, "evaluation images"),
    Option("core_ratio", float, data_mod.SynthSpec.core_ratio, "radius of the saturated core relative to the blob"),
    Option("body_mix", float, data_mod.SynthSpec.body_mix, "share of neutral tone in blob bodies"),
    Option("color_jitter", float, data_mod.SynthSpec.color_jitter, "per-blob colour jitter"),
    Option("noise", float, data_mod.SynthSpec.noise, "background noise level"),
    Option("occluder_prob", float, data_mod.SynthSpec.occluder_prob, "chance of an occluding bar"),
]
TRAIN_OPTIONS = [Option("data", str, None, "dataset file"), Option("out_dir", str, "run", "output directory")] + _train_options()
EVAL_OPTIONS = [
    Option("data", str, None, "dataset file"),
    Option("params", str, None, "parameter file written by train"),
    Option("split", str, "eval", "dataset split (train or eval)"),
    Option("thresholds", parse_range, "0.1:0.9:0.05", "seed sweep range start:stop:step"),
    Option("out", str, None, "curve CSV (default: stdout)"),
]
GRADCHECK_OPTIONS = [
    Option("seed", int, 0, "instance seed"),
    Option("h", float, 1e-5, "finite-difference step"),
    Option("n_coords", int, 200, "coordinates per loss term"),
    Option("size", int, 8, "image extent of the instance"),
    Option("network", parse_bool, False, "also check through the encoder weights", flag=True),
    Option("corrupt", parse_bool, False, "self-test: perturb analytic gradients so the check must fail", flag=True),
]
ABLATE_OPTIONS = TRAIN_OPTIONS + [
    Option("seeds", _ints, "0,1,2,3,4", "comma separated training seeds"),
    Option("k_values", _ints, ",".join(map(str, K_SWEEP)), "K sweep values"),
    Option("transforms", _names, ";".join(TRANSFORM_SWEEP), "semicolon separated transform sets"),
    Option("jobs", int, 1, "training runs executed in parallel processes"),
]

COMMANDS = {
    "gen-data": ("write a synthetic dataset file", DATA_OPTIONS),
    "train": ("train one model and write metrics, parameters and a report", TRAIN_OPTIONS),
    "eval-seeds": ("sweep background thresholds for saved parameters", EVAL_OPTIONS),
    "gradcheck": ("finite-difference check of every loss term", GRADCHECK_OPTIONS),
    "ablate": ("ablation ladder, K sweep and transform sweep", ABLATE_OPTIONS),
}


def read_config(path) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment line."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ppc", description="Pixel-to-prototype contrast toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(cmd, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value file; command-line flags override it")
        for opt in options:
            dest = opt.name
            flag = "--" + opt.name.replace("_", "-")
            help_ = f"{opt.help} (default: {_fmt(opt.default)})" if opt.help else f"default: {_fmt(opt.default)}"
            if opt.flag:
                p.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None, help=help_)
            else:
                p.add_argument(flag, dest=dest, default=None, help=help_)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags; every value parsed and unknown keys rejected."""
    options = {o.name: o for o in COMMANDS[command][1]}
    raw = {k: o.default for k, o in options.items()}
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in options:
                raise UsageError(f"unknown config key {key!r} for {command}")
            raw[key] = value
    for key in options:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    out = {}
    for key, opt in options.items():
        value = raw[key]
        if not isinstance(value, str):
            out[key] = value
            continue
        try:
            out[key] = opt.parse(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return out


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _config_lines(cfg: dict) -> list:
    return [f"{k}={_fmt(v)}" for k, v in cfg.items() if v is not None and k != "config"]


def _load_data(path):
    try:
        return data_mod.read_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset file not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_gen_data(cfg: dict) -> int:
    _require(cfg, "out")
    try:
        spec = data_mod.SynthSpec(num_classes=cfg["classes"], image_size=(cfg["image_size"],) * 2,
                                  blobs=(cfg["min_blobs"], cfg["max_blobs"]), core_ratio=cfg["core_ratio"],
                                  body_mix=cfg["body_mix"], color_jitter=cfg["color_jitter"], noise=cfg["noise"],
                                  occluder_prob=cfg["occluder_prob"], n_train=cfg["n_train"], n_eval=cfg["n_eval"])
    except ValueError as exc:
        raise UsageError(f"invalid dataset spec: {exc}") from None
    ds = data_mod.generate_dataset(spec, cfg["seed"])
    try:
        data_mod.write_dataset(cfg["out"], ds)
    except OSError as exc:
        raise UsageError(f"cannot write {cfg['out']}: {exc.strerror}") from None
    print(f"wrote {cfg['out']}: {len(ds.train)} train / {len(ds.eval)} eval images, "
          f"{spec.num_classes} classes, {spec.image_size[0]}x{spec.image_size[1]}")
    return EXIT_OK


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc.strerror}") from None
    return out


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data")
    ds = _load_data(cfg["data"])
    tc = _train_config(cfg)
    out = _out_dir(cfg["out_dir"])

    def log(row):
        print(f"epoch {row['epoch']:3d}  l_cls {row['l_cls']:.4f}  l_contrast {row['l_contrast']:.4f}  "
              f"seed mIoU {row['seed_miou']:.4f} @ {row['best_theta']:.2f}", flush=True)

    try:
        res = train(ds, tc, log=log)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    (out / "metrics.csv").write_text(res.metrics_csv())
    res.params.save(out / "params.npz")
    last = res.metrics[-1] if res.metrics else None
    summary = ["# ppc train report"]
    if last is not None:
        summary.append(f"# final seed mIoU {last['seed_miou']:.4f} at theta {last['best_theta']:.2f}")
    (out / "report.txt").write_text("\n".join(summary + _config_lines(cfg)) + "\n")
    print(f"wrote {out / 'metrics.csv'}, {out / 'params.npz'}, {out / 'report.txt'}")
    return EXIT_OK


def cmd_eval_seeds(cfg: dict) -> int:
    _require(cfg, "data", "params")
    ds = _load_data(cfg["data"])
    if cfg["split"] not in ("train", "eval"):
        raise UsageError("--split must be train or eval")
    split = getattr(ds, cfg["split"])
    try:
        params = ModelParams.load(cfg["params"])
    except FileNotFoundError:
        raise UsageError(f"params file not found: {cfg['params']}") from None
    thresholds = cfg["thresholds"]
    if any(not 0 < t < 1 for t in thresholds):
        raise UsageError("thresholds must lie in (0, 1)")
    if params.num_classes != ds.num_classes:
        raise UsageError(f"params have {params.num_classes} classes, dataset has {ds.num_classes}")
    cams = predict_cams(params, split.images, split.tags)
    stacks = [CamStack(c, frozenset((np.flatnonzero(t) + 1).tolist())) for c, t in zip(cams, split.tags)]
    best, curve = seed_sweep(stacks, list(split.masks), thresholds)
    text = "theta,miou\n" + "".join(f"{t:g},{m!r}\n" for t, m in zip(thresholds, curve))
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"# best theta {best:g}: seed mIoU {max(curve):.4f}", file=sys.stderr if not cfg["out"] else sys.stdout)
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    inst = build_instance(seed=cfg["seed"], size=cfg["size"])
    levels = [False, True] if cfg["network"] else [False]
    ok = True
    print(f"# gradient check: h={cfg['h']:g}, >= {cfg['n_coords']} coordinates per term, tolerance {TOLERANCE:g}")
    for network in levels:
        for term in TERMS:
            d = check_term(inst, term, h=cfg["h"], n_coords=cfg["n_coords"], network=network, corrupt=cfg["corrupt"])
            ok &= d["passed"]
            level = "network" if network else "module"
            extra = f", {d['skipped']} kink coords redrawn" if d["skipped"] else ""
            print(f"{'PASS' if d['passed'] else 'FAIL'} {term:6s} {level:8s} max rel err {d['max_rel_error']:.3e} "
                  f"over {d['checked']} coords{extra}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_ablate(cfg: dict) -> int:
    _require(cfg, "data")
    ds = _load_data(cfg["data"])
    tc = _train_config(cfg)
    out = _out_dir(cfg["out_dir"])

    def log(over, seed, score):
        desc = ",".join(f"{k}={_fmt(v)}" for k, v in over.items())
        print(f"seed {seed}  {desc}  seed mIoU {score:.4f}", flush=True)

    try:
        if cfg["jobs"] < 1:
            raise UsageError("--jobs must be >= 1")
        rows = ablate(ds, tc, seeds=cfg["seeds"], k_values=cfg["k_values"], transforms=cfg["transforms"],
                      log=log, jobs=cfg["jobs"])
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = ablation_table(rows)
    (out / "ablation.csv").write_text(table)
    summary = ["# ppc ablation report"] + [f"# {line}" for line in table.splitlines()]
    (out / "report.txt").write_text("\n".join(summary + _config_lines(cfg)) + "\n")
    sys.stdout.write(table)
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval-seeds": cmd_eval_seeds,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def _thread_limit():
    value = os.environ.get("PPC_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"PPC_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("PPC_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limiter = _thread_limit()
        cfg = resolve(args.command, args)
        try:
            return HANDLERS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"ppc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
