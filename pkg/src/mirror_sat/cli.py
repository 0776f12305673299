"""Command-line interface: ``mirror-sat <command> [flags]``.

Every command accepts ``--config FILE`` (flat ``key = value`` lines); flags
given on the command line win over the file, the file wins over defaults.
Exit codes: 0 success, 1 check failure, 2 usage or data error, 3 numeric
failure.
"""
from __future__ import annotations

import argparse
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import netpbm
from .config import ConfigError, parse_bool, parse_ints, read_config, write_config

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags or unusable input data (exit code 2)."""


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable[[str], Any]
    default: Any
    help: str
    echo: bool = True


def _path(text):
    return None if text in (None, "", "none") else str(text)


def _flip(text):
    from .model import FLIP_MODES

    if text not in FLIP_MODES:
        raise ValueError(f"must be one of {', '.join(FLIP_MODES)}")
    return text


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _rect(text):
    vals = parse_ints(text) if isinstance(text, str) else tuple(int(v) for v in text)
    if len(vals) != 4:
        raise ValueError("expected y0,x0,y1,x1")
    return vals


def _split(text):
    if text not in ("train", "val", "all"):
        raise ValueError("must be train, val or all")
    return text


MODEL_OPTS = [
    Opt("input_size", _positive, 64, "model input side in pixels"),
    Opt("flip_mode", _flip, "raw-query", "SAAM query for the flipped path: raw-query or aligned-query"),
    Opt("embed_dim", _positive, 32, "backbone channels C at stride 4"),
    Opt("patch_size", _positive, 4, "patch embedding size"),
    Opt("window_size", _positive, 4, "attention window side"),
    Opt("depths", parse_ints, (1, 1, 2, 1), "blocks per backbone stage"),
    Opt("heads", parse_ints, (1, 2, 4, 8), "attention heads per backbone stage"),
    Opt("mlp_ratio", _positive, 2, "MLP hidden ratio"),
    Opt("use_saam", parse_bool, True, "enable the symmetry-aware attention modules"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("seed", int, 0, "dataset seed"),
        Opt("count", _positive, 64, "number of image/mask pairs"),
        Opt("out", _path, None, "output directory"),
        Opt("size", _positive, 64, "image side in pixels"),
        Opt("val_fraction", _unit, 0.25, "fraction of indices placed in the val split"),
        Opt("min_area", _unit, 0.05, "minimum mirror area fraction"),
        Opt("max_area", _unit, 0.4, "maximum mirror area fraction"),
        Opt("distractor_fraction", _unit, 0.25, "probability of an unreflected distractor object"),
        Opt("noise_std", float, 0.02, "std of additive gaussian noise"),
    ],
    "train": [
        Opt("data", _path, None, "dataset directory (with manifest.txt)"),
        Opt("out", _path, None, "run directory"),
        Opt("iterations", _positive, 300, "optimizer steps"),
        Opt("batch", _positive, 4, "images per step"),
        Opt("lr", _positive_float, 6e-4, "base learning rate"),
        Opt("weight_decay", float, 0.01, "decoupled weight decay"),
        Opt("power", float, 1.0, "poly schedule power"),
        Opt("seed", int, 0, "initialization and sampling seed"),
        Opt("augment", parse_bool, True, "random resize-crop and horizontal flip"),
        Opt("log_every", _positive, 10, "metric log interval"),
        Opt("eval_every", _nonneg, 50, "validation interval for the best checkpoint (0: end only)"),
        Opt("checkpoint_every", _nonneg, 0, "interval for last.ckpt (0: end only)"),
        Opt("threshold", _unit, 0.5, "binarization threshold for validation IoU"),
        Opt("resume", _path, None, "checkpoint to resume from", echo=False),
        *MODEL_OPTS,
    ],
    "eval": [
        Opt("checkpoint", _path, None, "checkpoint file"),
        Opt("data", _path, None, "dataset directory"),
        Opt("split", _split, "val", "train, val or all"),
        Opt("threshold", _unit, 0.5, "binarization threshold"),
        Opt("report", _path, None, "report path (default: next to the checkpoint)"),
        Opt("input_size", _positive, None, "expected model input size"),
        Opt("flip_mode", _flip, None, "expected flip mode"),
    ],
    "infer": [
        Opt("checkpoint", _path, None, "checkpoint file"),
        Opt("image", _path, None, "P6 input image"),
        Opt("out", _path, None, "P5 mask output; the continuous map goes to <stem>.prob.pgm"),
        Opt("threshold", _unit, 0.5, "binarization threshold"),
        Opt("figure", parse_bool, False, "also write <stem>.png"),
    ],
    "gradcheck": [
        Opt("tolerance", _positive_float, 1e-6, "per-op max relative error"),
        Opt("e2e_tolerance", _positive_float, 1e-3, "end-to-end max relative error"),
        Opt("seed", int, 0, "seed for inputs and probed coordinates"),
        Opt("e2e_coords", _positive, 2, "probed coordinates per parameter end-to-end"),
    ],
    "dump-attn": [
        Opt("checkpoint", _path, None, "checkpoint file"),
        Opt("image", _path, None, "P6 input image"),
        Opt("scale", int, 3, "SAAM scale (2 or 3)"),
        Opt("query_rect", _rect, None, "query region y0,x0,y1,x1 in feature coordinates"),
        Opt("out", _path, None, "output directory"),
    ],
}

REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "eval": ("checkpoint", "data"),
    "infer": ("checkpoint", "image", "out"),
    "dump-attn": ("checkpoint", "image", "query_rect", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirror-sat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        if name in ("gen-data", "train"):
            p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            if o.kind is parse_bool:
                p.add_argument(flag, dest=o.name, default=None, action=argparse.BooleanOptionalAction,
                               help=o.help)
            else:
                p.add_argument(flag, dest=o.name, default=None, help=f"{o.help} (default: {o.default})")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, the config file and explicit flags, converting every value."""
    opts = {o.name: o for o in COMMANDS[command]}
    raw: dict[str, Any] = {}
    if ns.config:
        file_values = read_config(ns.config)
        unknown = sorted(set(file_values) - set(opts))
        if unknown:
            raise UsageError(f"{ns.config}: unknown key(s) for {command}: {', '.join(unknown)}")
        raw.update(file_values)
    for name in opts:
        v = getattr(ns, name, None)
        if v is not None:
            raw[name] = v
    out: dict[str, Any] = {}
    for name, o in opts.items():
        if name in raw:
            v = raw[name]
            try:
                out[name] = v if isinstance(v, bool) else o.kind(v)
            except (ValueError, ConfigError) as exc:
                raise UsageError(f"--{name.replace('_', '-')} {v!r}: {exc}") from None
        else:
            out[name] = o.default
    for name in REQUIRED.get(command, ()):
        if out[name] is None:
            raise UsageError(f"{command}: --{name.replace('_', '-')} is required")
    return out


def echo_config(command: str, values: dict, path) -> None:
    keep = {o.name: values[o.name] for o in COMMANDS[command] if o.echo and values[o.name] is not None}
    write_config(path, keep)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _load_ckpt(path):
    from .checkpoint import CheckpointError, load_checkpoint
    from .train import model_from_checkpoint

    try:
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except (CheckpointError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    return ckpt, model


def _read_input_image(path) -> np.ndarray:
    try:
        return netpbm.read_image(path).astype(np.float32) / 255.0
    except FileNotFoundError:
        raise UsageError(f"image not found: {path}") from None
    except netpbm.NetpbmError as exc:
        raise UsageError(str(exc)) from None


def _load_samples(data, split):
    from .data import load_dataset

    root = Path(data)
    if not (root / "manifest.txt").is_file():
        raise UsageError(f"no dataset at {root} (manifest.txt missing)")
    try:
        return load_dataset(root, None if split == "all" else split)
    except (netpbm.NetpbmError, ValueError, FileNotFoundError) as exc:
        raise UsageError(f"dataset {root}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, force: bool) -> int:
    from .data import GeneratorConfig, generate, write_dataset

    try:
        gen_cfg = GeneratorConfig(size=cfg["size"], min_area=cfg["min_area"], max_area=cfg["max_area"],
                                  distractor_fraction=cfg["distractor_fraction"], noise_std=cfg["noise_std"],
                                  val_fraction=cfg["val_fraction"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    _prepare_out(out, force)
    samples = generate(cfg["seed"], cfg["count"], gen_cfg)
    write_dataset(samples, out)
    echo_config("gen-data", cfg, out / "config.txt")
    n_val = sum(s.split == "val" for s in samples)
    print(f"wrote {len(samples)} samples ({len(samples) - n_val} train, {n_val} val) to {out}")
    return EXIT_OK


def model_config_from(cfg: dict):
    from .backbone import BackboneConfig
    from .model import ModelConfig

    try:
        bb = BackboneConfig(patch_size=cfg["patch_size"], embed_dim=cfg["embed_dim"], depths=cfg["depths"],
                            window_size=cfg["window_size"], heads=cfg["heads"], mlp_ratio=cfg["mlp_ratio"])
        return ModelConfig(input_size=cfg["input_size"], backbone=bb, flip_mode=cfg["flip_mode"],
                           use_saam=cfg["use_saam"], seed=cfg["seed"])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None


def cmd_train(cfg: dict, force: bool) -> int:
    from . import plots
    from .checkpoint import CheckpointError, load_checkpoint
    from .model import SATNet
    from .train import OptimConfig, TrainConfig, train

    model_cfg = model_config_from(cfg)
    try:
        train_cfg = TrainConfig(iterations=cfg["iterations"], batch_size=cfg["batch"], seed=cfg["seed"],
                                log_every=cfg["log_every"], eval_every=cfg["eval_every"],
                                checkpoint_every=cfg["checkpoint_every"], augment=cfg["augment"],
                                threshold=cfg["threshold"],
                                optim=OptimConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                                                  power=cfg["power"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    resume = None
    if cfg["resume"]:
        try:
            resume = load_checkpoint(cfg["resume"])
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"cannot resume from {cfg['resume']}: {exc}") from None
        if resume.config["model"] != model_cfg.to_dict():
            diff = sorted(k for k, v in model_cfg.to_dict().items() if resume.config["model"].get(k) != v)
            raise UsageError(f"resume checkpoint model config differs in: {', '.join(diff)}")
    train_set = _load_samples(cfg["data"], "train")
    if not train_set:
        raise UsageError(f"dataset {cfg['data']} has no training samples")
    val_set = _load_samples(cfg["data"], "val")
    out = Path(cfg["out"])
    if resume is None:
        _prepare_out(out, force)
    else:
        out.mkdir(parents=True, exist_ok=True)
    echo_config("train", cfg, out / "config.txt")

    model = SATNet(model_cfg)
    result = train(model, train_set, train_cfg, val_samples=val_set or None, out_dir=out, resume=resume,
                   on_log=print)
    log = plots.read_metric_log(out / "metrics.tsv")
    plots.loss_curve(log, out / "loss.png")
    print(f"best {result.best_split} IoU {result.best_iou:.6f}; checkpoints in {out}")
    return EXIT_OK


def _check_expected(ckpt, cfg: dict) -> None:
    model_cfg = ckpt.config["model"]
    for key in ("input_size", "flip_mode"):
        if cfg.get(key) is not None and model_cfg[key] != cfg[key]:
            raise UsageError(f"checkpoint/config mismatch in {key}: checkpoint has {model_cfg[key]!r}, "
                             f"requested {cfg[key]!r}")


def cmd_eval(cfg: dict) -> int:
    from . import plots
    from .metrics import evaluate

    ckpt, model = _load_ckpt(cfg["checkpoint"])
    _check_expected(ckpt, cfg)
    samples = _load_samples(cfg["data"], cfg["split"])
    if not samples:
        raise UsageError(f"split {cfg['split']!r} of {cfg['data']} is empty")
    result = evaluate(model, samples, cfg["threshold"])
    report = Path(cfg["report"]) if cfg["report"] else Path(cfg["checkpoint"]).with_name(f"eval_{cfg['split']}.tsv")
    report.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# name\tiou\tfbeta\tmae"] + result.report_lines()
    report.write_text("\n".join(lines) + "\n")
    s = result.per_image
    plots.metric_summary([x.name for x in s], [x.iou for x in s], [x.f_beta for x in s], [x.mae for x in s],
                         report.with_suffix(".png"))
    print(lines[-1])
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    from . import plots
    from .metrics import binarize
    from .train import predict_probability

    _, model = _load_ckpt(cfg["checkpoint"])
    image = _read_input_image(cfg["image"])
    prob = predict_probability(model, image[None])[0]
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    netpbm.write_mask(out, binarize(prob, cfg["threshold"]).astype(np.uint8))
    stem = out.with_suffix("")
    netpbm.write_gray(stem.with_name(stem.name + ".prob.pgm"), prob)
    if cfg["figure"]:
        plots.prediction_panel(image, prob, stem.with_suffix(".png"))
    print(f"mirror fraction {float(binarize(prob, cfg['threshold']).mean()):.4f}; wrote {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import run_suite

    rows = run_suite(cfg["tolerance"], cfg["e2e_tolerance"], cfg["seed"], cfg["e2e_coords"])
    width = max(len(r[0]) for r in rows)
    print(f"{'check':<{width}}\tmax_rel_err\ttolerance\tresult")
    for name, err, tol, ok in rows:
        print(f"{name:<{width}}\t{err:.3e}\t{tol:.0e}\t{'pass' if ok else 'FAIL'}")
    failed = [r[0] for r in rows if not r[3]]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_dump_attn(cfg: dict) -> int:
    from . import plots
    from .model import SAAM_SCALES, dump_attention
    from .train import resize_image, to_input

    if cfg["scale"] not in SAAM_SCALES:
        raise UsageError(f"--scale must be one of {SAAM_SCALES}")
    _, model = _load_ckpt(cfg["checkpoint"])
    if not model.cfg.use_saam:
        raise UsageError("checkpoint was trained without SAAM; no attention to dump")
    image = _read_input_image(cfg["image"])
    size = model.cfg.input_size
    x = resize_image(image, size)
    stride = model.cfg.backbone.patch_size * 2 ** cfg["scale"]
    h = w = size // stride
    y0, x0, y1, x1 = cfg["query_rect"]
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise UsageError(f"query rect {cfg['query_rect']} outside the {h}x{w} feature extent of scale {cfg['scale']}")
    raw, norm = dump_attention(model, to_input(x[None], model.cfg.dtype), cfg["scale"], cfg["query_rect"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    names = ("attn_F.pgm", "attn_Ff.pgm")
    for name, m in zip(names, norm):
        netpbm.write_gray(out / name, m)
    with open(out / "attn_raw.tsv", "w") as fh:
        fh.write("# branch\ty\tx\tweight\n")
        for branch, m in zip(("F", "Ff"), raw):
            for (yy, xx), v in np.ndenumerate(m):
                fh.write(f"{branch}\t{yy}\t{xx}\t{v:.8e}\n")
    plots.attention_panel(x, norm, cfg["query_rect"], (h, w), out / "attention.png",
                          titles=["original path", "flipped path"])
    for branch, m in zip(("F", "Ff"), raw):
        py, px = np.unravel_index(int(np.argmax(m)), m.shape)
        print(f"{branch}\tpeak ({py}, {px})\tweight {m[py, px]:.4e}")
    return EXIT_OK


def _apply_thread_cap():
    value = os.environ.get("MIRROR_SAT_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MIRROR_SAT_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    from .tensor import NonFiniteError
    from .train import TrainingDiverged

    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    try:
        limiter = _apply_thread_cap()
        cfg = resolve(command, ns)
        force = getattr(ns, "force", False)
        handlers = {
            "gen-data": lambda: cmd_gen_data(cfg, force),
            "train": lambda: cmd_train(cfg, force),
            "eval": lambda: cmd_eval(cfg),
            "infer": lambda: cmd_infer(cfg),
            "gradcheck": lambda: cmd_gradcheck(cfg),
            "dump-attn": lambda: cmd_dump_attn(cfg),
        }
        try:
            return handlers[command]()
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError) as exc:
        print(f"mirror-sat {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"mirror-sat {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

