"""Command-line entry point: data generation, optical flow, the two
training stages, evaluation reports, and the gradient-check suite.

Every command writes a ``run_manifest.txt`` (key=value lines) holding the
fully resolved configuration, so a run is reproducible from its manifest
alone. Configuration precedence: built-in defaults < ``--config`` file
(key=value text) < explicit flags.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import DimensionError, ParameterError
from .checkpoint import CheckpointError
from .data import (ClipFormatError, SynthConfig, VideoClip, gen_dataset,
                   load_clip, load_dataset, save_clip, save_dataset,
                   train_test_split)
from .flow import flow_clip
from .model import EncoderConfig, Model, ModelConfig
from .training import (TrainConfig, evaluate, load_training_checkpoint,
                       precompute_flows, pretrain, save_training_checkpoint,
                       train_classifier)

USAGE_ERROR = 2
IO_ERROR = 3


# --------------------------------------------------------------------------
# Config plumbing
# --------------------------------------------------------------------------

def _read_config_file(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    given = {k: v for k, v in vars(args).items() if k != "command"}
    config_path = given.pop("config", None)
    if config_path is not None:
        from_file = _read_config_file(Path(config_path))
        for key, value in from_file.items():
            if key not in merged:
                raise ParameterError(f"unknown config key {key!r}")
            merged[key] = _coerce(value, merged[key])
    merged.update(given)
    merged["config"] = config_path
    return merged


def write_manifest(out_dir: Path, command: str, cfg: dict,
                   artifacts: dict, wall_time: float) -> Path:
    lines = [f"command={command}", f"tool_version={__version__}"]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    lines += [f"artifact.{k}={v}" for k, v in sorted(artifacts.items())]
    lines.append(f"wall_time_s={wall_time:.3f}")
    path = out_dir / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def _parse_heads(spec: str) -> tuple:
    return tuple(h.strip() for h in spec.split(",") if h.strip())


def _parse_ratios(spec: str) -> tuple:
    return tuple(float(r) for r in spec.split(",") if r.strip())


def _model_config(cfg: dict, n_classes: int,
                  input_dims: tuple) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(input_dims=input_dims,
                              keep_prob=cfg["keep_prob"]),
        heads=_parse_heads(cfg["heads"]),
        n_classes=n_classes,
        two_stream=cfg["encoder"] == "rgb+flow")


def _save_model(path: Path, model: Model, state) -> None:
    save_training_checkpoint(path, model, state)
    meta = asdict(model.config)
    Path(f"{path}.json").write_text(json.dumps(meta, indent=2) + "\n")


def _load_model(path: Path):
    meta = json.loads(Path(f"{path}.json").read_text())
    enc = meta.pop("encoder")
    for key in ("input_dims", "conv_channels", "kernel", "spp_bins"):
        enc[key] = tuple(enc[key])
    enc["strides"] = tuple(tuple(s) for s in enc["strides"])
    meta["heads"] = tuple(meta["heads"])
    meta["deconv_channels"] = tuple(meta["deconv_channels"])
    config = ModelConfig(encoder=EncoderConfig(**enc), **meta)
    return load_training_checkpoint(path, config)


def _split(clips, cfg):
    return train_test_split(clips, test_fraction=cfg["test_fraction"],
                            seed=cfg["seed"])


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

GEN_DEFAULTS = {"classes": 6, "per_class": 10, "frames": "16,48,48",
                "key_frame": 0.5, "noise_std": 0.02, "seed": 0,
                "out_dir": "data"}


def cmd_gen_data(args) -> int:
    t0 = time.time()
    cfg = resolve_config(GEN_DEFAULTS, args)
    dims = tuple(int(v) for v in cfg["frames"].split(","))
    if len(dims) != 3:
        raise ParameterError(f"--frames wants T,H,W, got {cfg['frames']!r}")
    clips = gen_dataset(SynthConfig(
        n_classes=cfg["classes"], clips_per_class=cfg["per_class"],
        frame_dims=dims, key_frame_fraction=cfg["key_frame"],
        noise_std=cfg["noise_std"], seed=cfg["seed"]))
    out_dir = Path(cfg["out_dir"])
    manifest = save_dataset(clips, out_dir)
    write_manifest(out_dir, "gen-data", cfg,
                   {"dataset_manifest": manifest, "n_clips": len(clips)},
                   time.time() - t0)
    print(f"wrote {len(clips)} clips to {out_dir}")
    return 0


FLOW_DEFAULTS = {"data_dir": "data", "out_dir": "flow", "png": False,
                 "seed": 0}


def cmd_flow(args) -> int:
    t0 = time.time()
    cfg = resolve_config(FLOW_DEFAULTS, args)
    clips = load_dataset(cfg["data_dir"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for clip in clips:
        raw = flow_clip(clip.frames)
        path = out_dir / f"{clip.id}.flow.vid"
        save_clip(VideoClip(raw, label=clip.label, id=clip.id), path)
        written.append(path)
        if cfg["png"]:
            from .report import flow_magnitude_png
            flow_magnitude_png(raw, out_dir / f"{clip.id}.flow.png")
    write_manifest(out_dir, "flow", cfg, {"n_flow_clips": len(written)},
                   time.time() - t0)
    print(f"wrote {len(written)} flow clips to {out_dir}")
    return 0


TRAIN_DEFAULTS = {"data_dir": "data", "out_dir": "run", "seed": 0,
                  "encoder": "rgb+flow", "heads": "short,long",
                  "epochs": 50, "batch_size": 4,
                  "lambda1": 1.0, "lambda2": 0.1, "lambda3": 0.001,
                  "keep_prob": 0.9, "clip_length": 0, "multiscale": False,
                  "test_fraction": 0.25}


def _train_config(cfg: dict, stage: str, **extra) -> TrainConfig:
    return TrainConfig(
        stage=stage, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        heads=_parse_heads(cfg["heads"]), lambda1=cfg["lambda1"],
        lambda2=cfg["lambda2"], lambda3=cfg["lambda3"],
        keep_prob=cfg["keep_prob"], seed=cfg["seed"],
        clip_length=cfg["clip_length"] or None,
        multiscale=cfg["multiscale"], **extra)


def cmd_pretrain(args) -> int:
    t0 = time.time()
    cfg = resolve_config(TRAIN_DEFAULTS, args)
    clips = load_dataset(cfg["data_dir"])
    train, _ = _split(clips, cfg)
    n_classes = len({c.label for c in train})
    model = Model(_model_config(cfg, n_classes, train[0].frames.shape[:3]),
                  seed=cfg["seed"])
    state, metrics = pretrain(model, train, _train_config(cfg, "pretrain"))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "pretrain.ckpt"
    _save_model(ckpt, model, state)
    from .report import write_loss_csv
    loss_csv = write_loss_csv(metrics, out_dir / "pretrain_loss.csv")
    write_manifest(out_dir, "pretrain", cfg,
                   {"checkpoint": ckpt, "loss_csv": loss_csv},
                   time.time() - t0)
    print(f"pretrained {cfg['epochs']} epochs; checkpoint at {ckpt}")
    return 0


CLS_DEFAULTS = dict(TRAIN_DEFAULTS, checkpoint="", no_pretrain=False,
                    freeze_encoder=False)


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = resolve_config(CLS_DEFAULTS, args)
    if bool(cfg["checkpoint"]) == bool(cfg["no_pretrain"]):
        raise ParameterError(
            "pass exactly one of --checkpoint or --no-pretrain")
    clips = load_dataset(cfg["data_dir"])
    train, _ = _split(clips, cfg)
    n_classes = len({c.label for c in train})
    if cfg["checkpoint"]:
        model, _pre_state = _load_model(Path(cfg["checkpoint"]))
    else:
        model = Model(_model_config(cfg, n_classes,
                                    train[0].frames.shape[:3]),
                      seed=cfg["seed"])
    tcfg = _train_config(cfg, "classify",
                         freeze_encoder=cfg["freeze_encoder"])
    state, metrics = train_classifier(model, train, tcfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "train.ckpt"
    _save_model(ckpt, model, state)
    from .report import write_loss_csv
    loss_csv = write_loss_csv(metrics, out_dir / "train_loss.csv")
    write_manifest(out_dir, "train", cfg,
                   {"checkpoint": ckpt, "loss_csv": loss_csv},
                   time.time() - t0)
    print(f"trained classifier {cfg['epochs']} epochs; "
          f"checkpoint at {ckpt}")
    return 0


EVAL_DEFAULTS = {"data_dir": "data", "out_dir": "eval", "seed": 0,
                 "ratios": "0.2,0.4,0.6,0.8,1.0", "draws": 1,
                 "mse": False, "test_fraction": 0.25}


def cmd_eval(args) -> int:
    t0 = time.time()
    cfg = resolve_config(EVAL_DEFAULTS, args)
    cfg["checkpoint"] = list(args.checkpoint)
    clips = load_dataset(cfg["data_dir"])
    _, test = _split(clips, cfg)
    ratios = _parse_ratios(cfg["ratios"])
    flows = None
    reports = []
    for entry in cfg["checkpoint"]:
        variant, _, path = entry.rpartition("=")
        variant = variant or Path(path).stem
        model, _state = _load_model(Path(path))
        if model.config.two_stream and flows is None:
            flows = precompute_flows(test)
        reports.append(evaluate(model, test, ratios, eval_seed=cfg["seed"],
                                flows=flows, variant=variant,
                                with_mse=cfg["mse"], draws=cfg["draws"]))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    from .report import accuracy_chart, write_accuracy_csv, write_mse_csv
    artifacts = {
        "accuracy_csv": write_accuracy_csv(reports, out_dir / "accuracy.csv"),
        "accuracy_svg": accuracy_chart(reports, out_dir / "accuracy.svg")}
    if cfg["mse"]:
        artifacts["mse_csv"] = write_mse_csv(reports, out_dir / "mse.csv")
    write_manifest(out_dir, "eval", cfg, artifacts, time.time() - t0)
    for rep in reports:
        row = "  ".join(f"r={r:g}:{a:.3f}"
                        for r, a in sorted(rep.accuracy_by_ratio.items()))
        print(f"{rep.variant}: {row}")
    return 0


GRADCHECK_DEFAULTS = {"op": "", "corrupt": False, "seed": 0}


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(GRADCHECK_DEFAULTS, args)
    from .verify import gradcheck_suite
    ops = _parse_heads(cfg["op"]) or None
    results = gradcheck_suite(ops=ops, corrupt=cfg["corrupt"])
    width = max(len(name) for name, _, _ in results)
    failed = 0
    for name, err, ok in results:
        print(f"{name:<{width}}  {err:12.3e}  {'ok' if ok else 'FAIL'}")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 0 if failed == 0 else 1


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _add_common(sub, *names):
    flags = {
        "seed": dict(type=int),
        "data_dir": dict(),
        "out_dir": dict(),
        "config": dict(),
        "encoder": dict(choices=["rgb", "rgb+flow"]),
        "heads": dict(),
        "ratios": dict(),
        "lambda1": dict(type=float), "lambda2": dict(type=float),
        "lambda3": dict(type=float),
        "keep_prob": dict(type=float),
        "epochs": dict(type=int), "batch_size": dict(type=int),
        "clip_length": dict(type=int),
        "test_fraction": dict(type=float),
        "draws": dict(type=int),
    }
    for name in names:
        if name in flags:
            sub.add_argument(f"--{name.replace('_', '-')}",
                             default=argparse.SUPPRESS, **flags[name])
        else:  # boolean switch
            sub.add_argument(f"--{name.replace('_', '-')}",
                             action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionvae",
        description="Early action prediction with a future-predictive "
                    "two-stream video VAE")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=argparse.SUPPRESS)
    p.add_argument("--per-class", type=int, default=argparse.SUPPRESS)
    p.add_argument("--frames", default=argparse.SUPPRESS,
                   help="T,H,W clip dimensions")
    p.add_argument("--key-frame", type=float, default=argparse.SUPPRESS)
    p.add_argument("--noise-std", type=float, default=argparse.SUPPRESS)
    _add_common(p, "seed", "out_dir", "config")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("flow", help="compute TV-L1 flow for a dataset")
    p.add_argument("--png", action="store_true", default=argparse.SUPPRESS,
                   help="also dump flow-magnitude PNGs")
    _add_common(p, "seed", "data_dir", "out_dir", "config")
    p.set_defaults(func=cmd_flow)

    p = subs.add_parser("pretrain", help="train encoder + decoder heads")
    _add_common(p, "seed", "data_dir", "out_dir", "config", "encoder",
                "heads", "epochs", "batch_size", "lambda1", "lambda2",
                "lambda3", "keep_prob", "clip_length", "multiscale",
                "test_fraction")
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("train", help="train the action classifier")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS,
                   help="pretraining checkpoint to start from")
    p.add_argument("--no-pretrain", action="store_true",
                   default=argparse.SUPPRESS,
                   help="start from random initialization")
    _add_common(p, "seed", "data_dir", "out_dir", "config", "encoder",
                "heads", "epochs", "batch_size", "lambda1", "lambda2",
                "lambda3", "keep_prob", "clip_length", "multiscale",
                "freeze_encoder", "test_fraction")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="accuracy-vs-ratio report")
    p.add_argument("--checkpoint", action="append", required=True,
                   metavar="[VARIANT=]PATH",
                   help="model checkpoint; repeat for several variants")
    p.add_argument("--mse", action="store_true", default=argparse.SUPPRESS,
                   help="also emit the per-head reconstruction MSE table")
    _add_common(p, "seed", "data_dir", "out_dir", "config", "ratios",
                "draws", "test_fraction")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", default=argparse.SUPPRESS,
                   help="comma list restricting which ops to check")
    p.add_argument("--corrupt", action="store_true",
                   default=argparse.SUPPRESS,
                   help="include a deliberately wrong gradient (hook for "
                        "testing the detector)")
    _add_common(p, "seed", "config")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = args.func
    del args.func
    try:
        return func(args)
    except (ParameterError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FileNotFoundError, ClipFormatError, CheckpointError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
