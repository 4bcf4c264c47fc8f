"""Adadelta optimization, the pretrain/classify schedule, and evaluation.

Gradient accumulation over a batch is order-fixed (clip-index order) and
every stochastic choice derives from (seed, epoch, step), so a resumed
run reproduces an unbroken one step for step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import DimensionError, ParameterError, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DEFAULT_CROP_SIZES, VideoClip, derive_seed,
                   multiscale_crop, resize)
from .flow import flow_clip
from .model import Model, ModelConfig
from .params import ParameterSet

GRAD_CLIP_NORM = 10.0


@dataclass
class AdadeltaState:
    """Decayed accumulators of squared gradients and squared updates."""
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    eg2: dict = field(default_factory=dict)
    edx2: dict = field(default_factory=dict)

    def ensure(self, name: str, shape) -> None:
        if name not in self.eg2:
            self.eg2[name] = np.zeros(shape)
            self.edx2[name] = np.zeros(shape)


@dataclass
class TrainConfig:
    stage: str = "pretrain"                 # pretrain | classify
    epochs: int = 50
    batch_size: int = 4
    heads: tuple = ("short", "long")
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.001
    keep_prob: float = 0.9
    freeze_encoder: bool = False
    seed: int = 0
    ratios: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    clip_length: Optional[int] = None       # random temporal window
    multiscale: bool = False                # random crop + original pair
    crop_sizes: tuple = DEFAULT_CROP_SIZES

    def __post_init__(self):
        if self.stage not in ("pretrain", "classify"):
            raise ParameterError(f"unknown stage {self.stage!r}")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass
class MetricsReport:
    variant: str
    accuracy_by_ratio: dict = field(default_factory=dict)   # ratio -> acc
    n_eval: int = 0
    per_head_mse: dict = field(default_factory=dict)        # head -> mse
    loss_rows: list = field(default_factory=list)


def adadelta_step(params: ParameterSet, grads: dict,
                  state: AdadeltaState) -> None:
    """One Adadelta update: x += lr * dx with the standard accumulators."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise DimensionError(
                f"grad shape {g.shape} != param {p.shape} for {name}")
        state.ensure(name, p.shape)
        state.eg2[name] = state.rho * state.eg2[name] + (1 - state.rho) * g * g
        dx = -np.sqrt(state.edx2[name] + state.eps) \
            / np.sqrt(state.eg2[name] + state.eps) * g
        state.edx2[name] = (state.rho * state.edx2[name]
                            + (1 - state.rho) * dx * dx)
        p.data = p.data + state.lr * dx


def clip_gradients(grads: dict, max_norm: float = GRAD_CLIP_NORM) -> dict:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def collect_grads(params: ParameterSet) -> dict:
    return {name: (t.grad if t.grad is not None else np.zeros(t.shape))
            for name, t in params.items()}


def precompute_flows(clips: Sequence[VideoClip],
                     flows: Optional[dict] = None) -> dict:
    """Raw TV-L1 flow per clip, keyed by clip id (computed once)."""
    flows = dict(flows or {})
    for clip in clips:
        if clip.id not in flows:
            flows[clip.id] = flow_clip(clip.frames)
    return flows


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _training_views(cfg: TrainConfig, clip: VideoClip,
                    raw_flow: Optional[np.ndarray],
                    rng: np.random.Generator) -> list:
    """Augmented (clip, flow) samples: temporal window, then crop pairs.

    A spatial crop invalidates the precomputed flow, so cropped samples
    carry ``None`` and have their flow recomputed inside the loss.
    """
    view, vflow = clip, raw_flow
    if cfg.clip_length and cfg.clip_length < clip.n_frames:
        start = int(rng.integers(0, clip.n_frames - cfg.clip_length + 1))
        view = VideoClip(clip.frames[start:start + cfg.clip_length],
                         label=clip.label, id=clip.id)
        if vflow is not None:
            vflow = vflow[start:start + cfg.clip_length - 1]
    if not cfg.multiscale:
        return [(view, vflow)]
    cropped, original = multiscale_crop(view, cfg.crop_sizes, rng)
    h, w = view.frames.shape[1:3]
    return [(resize(cropped, h, w), None), (original, vflow)]


def _run_stage(model: Model, clips: Sequence[VideoClip], cfg: TrainConfig,
               flows: dict, state: AdadeltaState, start_epoch: int,
               metrics: list) -> None:
    need_flow = model.config.two_stream or (cfg.stage == "pretrain"
                                            and "flow" in model.config.heads)
    classify = cfg.stage == "classify"
    model.config.encoder.keep_prob = cfg.keep_prob
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed,
                                                f"{cfg.stage}.e{epoch}"))
        for step, batch in enumerate(_batches(len(clips), cfg.batch_size,
                                              rng)):
            acc: dict = {}
            sums = np.zeros(4)
            n_samples = 0
            for j in batch:
                clip = clips[int(j)]
                raw_flow = flows.get(clip.id) if need_flow else None
                aug_rng = np.random.default_rng(derive_seed(
                    cfg.seed, f"aug.{cfg.stage}.e{epoch}.s{step}.{clip.id}"))
                for k, (view, vflow) in enumerate(
                        _training_views(cfg, clip, raw_flow, aug_rng)):
                    noise_seed = derive_seed(
                        cfg.seed,
                        f"{cfg.stage}.e{epoch}.s{step}.{clip.id}.{k}")
                    model.params.zero_grad()
                    if classify:
                        loss, _ = model.classifier_clip_loss(
                            view, vflow, noise_seed, training=True)
                        if cfg.lambda3:
                            from .params import l2_penalty
                            from . import autodiff as ad
                            l2 = l2_penalty(model.params)
                            sums += (0.0, 0.0, l2.item(), 0.0)
                            loss = ad.add(loss, ad.mul(l2, cfg.lambda3))
                        sums += (0.0, 0.0, 0.0, loss.item())
                    else:
                        loss, bd = model.clip_loss(view, vflow, cfg.lambdas,
                                                   noise_seed, training=True)
                        sums += (bd.l_r, bd.l_vae, bd.l_l2, bd.total)
                    Tape().backward(loss)
                    n_samples += 1
                    for name, g in collect_grads(model.params).items():
                        acc[name] = acc.get(name, 0.0) + g
            acc = {name: g / n_samples for name, g in acc.items()}
            if classify and cfg.freeze_encoder:
                acc = {k: v for k, v in acc.items() if k.startswith("cls.")}
            adadelta_step(model.params, clip_gradients(acc), state)
            mean = sums / n_samples
            metrics.append({"stage": cfg.stage, "epoch": epoch, "step": step,
                            "l_r": mean[0], "l_vae": mean[1],
                            "l_l2": mean[2], "total": mean[3]})


def pretrain(model: Model, clips: Sequence[VideoClip], cfg: TrainConfig,
             flows: Optional[dict] = None, state: Optional[AdadeltaState] = None,
             start_epoch: int = 0, metrics: Optional[list] = None) -> tuple:
    """Minimize the fused generation objective; returns (state, metrics)."""
    need = model.config.future_frames_needed + 2
    short = [c.id for c in clips if c.n_frames < need]
    if short:
        raise DimensionError(
            f"clips too short for heads {model.config.heads} "
            f"(need >= {need} frames): {short[:5]}")
    if cfg.clip_length is not None and cfg.clip_length < need:
        raise ParameterError(
            f"clip_length {cfg.clip_length} < the {need} frames the active "
            f"heads require")
    metrics = metrics if metrics is not None else []
    flows = precompute_flows(clips, flows) \
        if (model.config.two_stream or "flow" in model.config.heads) else {}
    state = state or AdadeltaState()
    _run_stage(model, clips, cfg, flows, state, start_epoch, metrics)
    return state, metrics


def train_classifier(model: Model, clips: Sequence[VideoClip],
                     cfg: TrainConfig, flows: Optional[dict] = None,
                     state: Optional[AdadeltaState] = None,
                     start_epoch: int = 0,
                     metrics: Optional[list] = None) -> tuple:
    """Minimize classification loss; decoders stay inactive."""
    labels = {c.label for c in clips}
    if None in labels:
        raise ParameterError("classifier training needs labeled clips")
    if max(labels) >= model.config.n_classes:
        raise ParameterError(
            f"dataset has label {max(labels)} but model expects "
            f"{model.config.n_classes} classes")
    metrics = metrics if metrics is not None else []
    flows = precompute_flows(clips, flows) if model.config.two_stream else {}
    state = state or AdadeltaState()
    cfg = TrainConfig(**{**cfg.__dict__, "stage": "classify"})
    _run_stage(model, clips, cfg, flows, state, start_epoch, metrics)
    return state, metrics


def evaluate(model: Model, clips: Sequence[VideoClip],
             ratios: Sequence[float], eval_seed: int = 0,
             flows: Optional[dict] = None, variant: str = "model",
             with_mse: bool = False, draws: int = 1) -> MetricsReport:
    """Accuracy per observation ratio, plus optional per-head MSE."""
    if not clips:
        raise ParameterError("evaluate needs a non-empty dataset")
    report = MetricsReport(variant=variant, n_eval=len(clips))
    if model.config.two_stream:
        flows = precompute_flows(clips, flows)
    else:
        flows = flows or {}
    for r in ratios:
        hits = 0
        for clip in clips:
            pred, _ = model.predict(clip, ratio=r, eval_seed=eval_seed,
                                    raw_flow=flows.get(clip.id),
                                    draws=draws)
            hits += int(pred == clip.label)
        report.accuracy_by_ratio[float(r)] = hits / len(clips)
    if with_mse and model.config.heads:
        per_head: dict = {h: 0.0 for h in model.config.heads}
        for clip in clips:
            _, bd = model.clip_loss(
                clip, flows.get(clip.id), (1.0, 0.0, 0.0),
                noise_seed=derive_seed(eval_seed, f"mse.{clip.id}"),
                training=False)
            for h, v in bd.per_head.items():
                per_head[h] += v / len(clips)
        report.per_head_mse = per_head
    return report


# -- checkpoint glue ---------------------------------------------------------

def save_training_checkpoint(path, model: Model,
                             state: AdadeltaState) -> None:
    opt: dict = {"rho": np.asarray(state.rho), "eps": np.asarray(state.eps),
                 "lr": np.asarray(state.lr)}
    for name, _ in model.params.items():
        state.ensure(name, model.params[name].shape)
        opt[f"{name}/eg2"] = state.eg2[name]
        opt[f"{name}/edx2"] = state.edx2[name]
    save_checkpoint(path, model.params.copy_values(), opt)


def load_training_checkpoint(path, config: ModelConfig
                             ) -> tuple[Model, AdadeltaState]:
    values, opt = load_checkpoint(path)
    params = ParameterSet()
    for name, arr in values.items():
        params.add(name, Tensor(arr))
    model = Model(config, params=params)
    state = AdadeltaState(rho=float(opt["rho"]), eps=float(opt["eps"]),
                          lr=float(opt["lr"]))
    for name in values:
        state.eg2[name] = opt[f"{name}/eg2"].copy()
        state.edx2[name] = opt[f"{name}/edx2"].copy()
    return model, state
