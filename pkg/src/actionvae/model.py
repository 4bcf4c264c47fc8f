"""Two-stream 3D-conv variational encoder, multi-head future decoders,
and the softmax action classifier.

The encoder maps an observed RGB window (and optionally its optical-flow
window) to a 12-dim Gaussian latent. The reparameterized sample splits
into halves: RGB-family decoder heads read the first half, the
future-flow head reads the second, and the classifier consumes the full
sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConvKernel, DimensionError, ParameterError, Tensor
from .data import VideoClip, derive_seed
from .flow import flow_clip, normalize_flow
from .params import ParameterSet, init_value

HEAD_KINDS = ("short", "long", "past", "flow")
LATENT_DIM = 12

# future-frame offsets of the generator heads
HORIZON = {"short": 1, "long": 4, "past": 0, "flow": 1}


@dataclass
class EncoderConfig:
    input_dims: tuple = (16, 48, 48)          # (T, H, W)
    conv_channels: tuple = (4, 8, 8, 8)
    kernel: tuple = (3, 3, 3)
    strides: tuple = ((1, 2, 2), (1, 2, 2), (1, 2, 2), (1, 1, 1))
    keep_prob: float = 0.9
    spp_bins: tuple = (4, 2, 1)
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        if len(self.conv_channels) != 4 or len(self.strides) != 4:
            raise ParameterError("encoder uses exactly 4 conv layers")
        if self.latent_dim != LATENT_DIM:
            raise ParameterError(f"latent width is fixed at {LATENT_DIM}")
        h = self.input_dims[1]
        w = self.input_dims[2]
        for s in self.strides:
            h = (h + 2 - self.kernel[1]) // s[1] + 1
            w = (w + 2 - self.kernel[2]) // s[2] + 1
        if min(h, w) < max(self.spp_bins):
            raise DimensionError(
                f"final feature map ({h}, {w}) smaller than largest SPP bin")
        self.feature_hw = (h, w)

    @property
    def spp_width(self) -> int:
        return self.conv_channels[-1] * sum(b * b for b in self.spp_bins)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: tuple = ("short", "long")
    n_classes: int = 6
    two_stream: bool = True
    classifier_sigmoid: bool = False
    deconv_channels: tuple = (16, 16, 8, 8)
    rgb_channels: int = 3
    logvar_clamp: float = 20.0

    def __post_init__(self):
        for h in self.heads:
            if h not in HEAD_KINDS:
                raise ParameterError(f"unknown decoder head {h!r}")
        if len(self.deconv_channels) != 4:
            raise ParameterError("decoder uses exactly 5 deconv layers "
                                 "(4 interior channel counts)")

    @property
    def future_frames_needed(self) -> int:
        horizons = [HORIZON[h] for h in self.heads] or [0]
        # the flow head needs the pair (t+1, t+2)
        return max(max(horizons), 2 if "flow" in self.heads else 0)


@dataclass
class LatentCode:
    mean: Tensor
    logvar: Tensor
    sample: Tensor

    @property
    def z1(self) -> Tensor:
        return ad.slice1d(self.sample, 0, LATENT_DIM // 2)

    @property
    def z2(self) -> Tensor:
        return ad.slice1d(self.sample, LATENT_DIM // 2, LATENT_DIM)


@dataclass
class LossBreakdown:
    l_r: float
    l_vae: float
    l_l2: float
    lambda1: float
    lambda2: float
    lambda3: float
    total: float
    l_cla: Optional[float] = None
    per_head: dict = field(default_factory=dict)


def _deconv_size_chain(target: int, layers: int = 5) -> list[int]:
    """Spatial sizes seed..target across the deconv stack (stride-2 plan)."""
    sizes = [target]
    for _ in range(layers):
        sizes.append(max(1, math.ceil(sizes[-1] / 2)))
    return sizes[::-1]


class Model:
    """Parameter container plus forward passes for every stage."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: Optional[ParameterSet] = None):
        self.config = config
        if params is not None:
            self.params = params
        else:
            self.params = ParameterSet()
            self._build(np.random.default_rng(derive_seed(seed, "init")))

    # -- construction -------------------------------------------------------
    def _add(self, rng, name, shape):
        self.params.add(name, Tensor(init_value(rng, name, shape)))

    def _build(self, rng):
        cfg = self.config
        enc = cfg.encoder
        k = enc.kernel
        streams = [("rgb", cfg.rgb_channels)]
        if cfg.two_stream:
            streams.append(("flow", 2))
        for stream, c_in in streams:
            chans = (c_in,) + enc.conv_channels
            for i in range(4):
                self._add(rng, f"enc.{stream}.conv{i}.w",
                          (chans[i + 1], chans[i]) + k)
                self._add(rng, f"enc.{stream}.conv{i}.b", (chans[i + 1],))
        fw = enc.spp_width * (2 if cfg.two_stream else 1)
        self._add(rng, "enc.mean.w", (LATENT_DIM, fw))
        self._add(rng, "enc.mean.b", (LATENT_DIM,))
        self._add(rng, "enc.logvar.w", (LATENT_DIM, fw))
        self._add(rng, "enc.logvar.b", (LATENT_DIM,))

        _, h, w = enc.input_dims
        hs = _deconv_size_chain(h)
        ws = _deconv_size_chain(w)
        for head in cfg.heads:
            c_out = 2 if head == "flow" else cfg.rgb_channels
            chans = (cfg.deconv_channels[0],) + cfg.deconv_channels + (c_out,)
            self._add(rng, f"dec.{head}.seed.w",
                      (chans[0] * hs[0] * ws[0], LATENT_DIM // 2))
            self._add(rng, f"dec.{head}.seed.b", (chans[0] * hs[0] * ws[0],))
            for i in range(5):
                self._add(rng, f"dec.{head}.deconv{i}.w",
                          (chans[i], chans[i + 1], 1, 3, 3))
                self._add(rng, f"dec.{head}.deconv{i}.b", (chans[i + 1],))

        self._add(rng, "cls.w", (cfg.n_classes, LATENT_DIM))
        self._add(rng, "cls.b", (cfg.n_classes,))

    def _kernel(self, prefix: str) -> ConvKernel:
        return ConvKernel(self.params[f"{prefix}.w"],
                          self.params[f"{prefix}.b"])

    # -- encoder ------------------------------------------------------------
    def _stream_features(self, x: Tensor, stream: str, training: bool,
                         noise_seed: int) -> Tensor:
        enc = self.config.encoder
        h = x
        for i in range(4):
            h = ad.conv3d(h, self._kernel(f"enc.{stream}.conv{i}"),
                          enc.strides[i], (1, 1, 1))
            h = ad.activation(h, "relu")
            h = ad.dropout(h, enc.keep_prob,
                           derive_seed(noise_seed, f"drop.{stream}.{i}"),
                           training)
        return ad.spp_pool(h, enc.spp_bins)

    def encode(self, rgb: np.ndarray, flow: Optional[np.ndarray] = None,
               training: bool = False, noise_seed: int = 0
               ) -> tuple[Tensor, Tensor]:
        """Observed frames (T,H,W,C) [+ normalized flow (T-1,H,W,2)] to
        the latent mean and logvar (12 each)."""
        cfg = self.config
        if cfg.two_stream and flow is None:
            raise ParameterError("two-stream model needs a flow clip")
        x = Tensor(np.transpose(rgb, (3, 0, 1, 2)))
        fv = self._stream_features(x, "rgb", training, noise_seed)
        if cfg.two_stream:
            if flow.shape[0] < 1:
                raise DimensionError("flow stream needs >= 1 field, so the "
                                     "observed window must be >= 2 frames")
            xf = Tensor(np.transpose(flow, (3, 0, 1, 2)))
            fv = ad.concat(fv, self._stream_features(xf, "flow", training,
                                                     noise_seed), axis=0)
        mean = ad.affine(fv, self.params["enc.mean.w"],
                         self.params["enc.mean.b"])
        logvar = ad.affine(fv, self.params["enc.logvar.w"],
                           self.params["enc.logvar.b"])
        c = self.config.logvar_clamp
        logvar = _clamp(logvar, -c, c)
        return mean, logvar

    def reparameterize(self, mean: Tensor, logvar: Tensor,
                       noise: np.ndarray) -> LatentCode:
        """z = mean + exp(logvar/2) * eps; gradient flows to mean/logvar."""
        eps = Tensor(np.asarray(noise, dtype=float))
        if eps.shape != mean.shape:
            raise DimensionError(f"noise shape {eps.shape} != {mean.shape}")
        std = ad.exp(ad.mul(logvar, 0.5))
        sample = ad.add(mean, ad.mul(std, eps))
        return LatentCode(mean, logvar, sample)

    # -- decoders -----------------------------------------------------------
    def decode(self, head: str, z_part: Tensor, training: bool = False
               ) -> Tensor:
        """Latent half to a (C, 1, H, W) frame; sigmoid keeps it in [0,1]."""
        cfg = self.config
        if head not in cfg.heads:
            raise ParameterError(f"head {head!r} not in model config")
        if z_part.shape != (LATENT_DIM // 2,):
            raise DimensionError(
                f"decoder input width {z_part.shape} != {LATENT_DIM // 2}")
        _, h, w = cfg.encoder.input_dims
        hs = _deconv_size_chain(h)
        ws = _deconv_size_chain(w)
        c0 = cfg.deconv_channels[0]
        seed = ad.affine(z_part, self.params[f"dec.{head}.seed.w"],
                         self.params[f"dec.{head}.seed.b"])
        vol = ad.reshape(seed, (c0, 1, hs[0], ws[0]))
        for i in range(5):
            vol = ad.deconv3d(vol, self._kernel(f"dec.{head}.deconv{i}"),
                              (1, 2, 2), (0, 1, 1),
                              (1, hs[i + 1], ws[i + 1]))
            vol = ad.activation(vol, "sigmoid" if i == 4 else "relu")
        return vol

    def head_z(self, head: str, code: LatentCode) -> Tensor:
        return code.z2 if head == "flow" else code.z1

    # -- classifier ---------------------------------------------------------
    def classify_latent(self, code: LatentCode) -> Tensor:
        logits = ad.affine(code.sample, self.params["cls.w"],
                           self.params["cls.b"])
        if self.config.classifier_sigmoid:
            logits = ad.activation(logits, "sigmoid")
        return ad.softmax(logits)

    # -- losses -------------------------------------------------------------
    def head_target(self, head: str, clip: VideoClip, raw_flow: np.ndarray,
                    t_obs: int) -> np.ndarray:
        """Ground-truth (C, 1, H, W) volume for a decoder head.

        Observed frames are indices [0, t_obs); "short" targets the next
        frame, "long" the fourth future one, "past" the last observed,
        "flow" the normalized flow of the first future frame pair.
        """
        if head == "flow":
            tgt = normalize_flow(raw_flow[t_obs])
        else:
            idx = t_obs + HORIZON[head] - 1
            tgt = clip.frames[idx]
        return np.transpose(tgt, (2, 0, 1))[:, None, :, :]

    def clip_loss(self, clip: VideoClip, raw_flow: Optional[np.ndarray],
                  lambdas: tuple[float, float, float], noise_seed: int,
                  training: bool = True,
                  l2_term: Optional[Tensor] = None
                  ) -> tuple[Tensor, LossBreakdown]:
        """Composite pretraining objective for one clip.

        Returns the fused scalar loss tensor and its numeric breakdown.
        ``l2_term`` lets a batch share one weight-penalty subgraph.
        """
        cfg = self.config
        t_obs = clip.n_frames - cfg.future_frames_needed
        if t_obs < 2:
            raise DimensionError(
                f"clip {clip.id or '?'} has {clip.n_frames} frames; needs "
                f">= {cfg.future_frames_needed + 2} for heads {cfg.heads}")
        if cfg.two_stream or "flow" in cfg.heads:
            if raw_flow is None:
                raw_flow = flow_clip(clip.frames)
        obs_rgb = clip.frames[:t_obs]
        obs_flow = (normalize_flow(raw_flow[:t_obs - 1])
                    if cfg.two_stream else None)

        mean, logvar = self.encode(obs_rgb, obs_flow, training=training,
                                   noise_seed=noise_seed)
        rng = np.random.default_rng(derive_seed(noise_seed, "reparam"))
        code = self.reparameterize(mean, logvar, rng.standard_normal(12))

        l_r = Tensor(np.asarray(0.0))
        per_head = {}
        for head in cfg.heads:
            pred = self.decode(head, self.head_z(head, code),
                               training=training)
            target = Tensor(self.head_target(head, clip, raw_flow, t_obs))
            term = ad.mse(pred, target)
            per_head[head] = term.item()
            l_r = ad.add(l_r, term)
        l_vae = ad.kl_std_normal(mean, logvar)
        if l2_term is None:
            from .params import l2_penalty
            l2_term = l2_penalty(self.params)
        lam1, lam2, lam3 = lambdas
        total = ad.add(ad.add(ad.mul(l_r, lam1), ad.mul(l_vae, lam2)),
                       ad.mul(l2_term, lam3))
        breakdown = LossBreakdown(l_r=l_r.item(), l_vae=l_vae.item(),
                                  l_l2=l2_term.item(), lambda1=lam1,
                                  lambda2=lam2, lambda3=lam3,
                                  total=total.item(), per_head=per_head)
        return total, breakdown

    def classifier_clip_loss(self, clip: VideoClip,
                             raw_flow: Optional[np.ndarray],
                             noise_seed: int, training: bool = True
                             ) -> tuple[Tensor, Tensor]:
        """Cross-entropy of the classifier on one labeled clip.

        Returns (loss tensor, probability tensor)."""
        if clip.label is None:
            raise ParameterError(f"clip {clip.id or '?'} has no label")
        cfg = self.config
        if cfg.two_stream and raw_flow is None:
            raw_flow = flow_clip(clip.frames)
        obs_flow = normalize_flow(raw_flow) if cfg.two_stream else None
        mean, logvar = self.encode(clip.frames, obs_flow, training=training,
                                   noise_seed=noise_seed)
        rng = np.random.default_rng(derive_seed(noise_seed, "reparam"))
        code = self.reparameterize(mean, logvar, rng.standard_normal(12))
        probs = self.classify_latent(code)
        return ad.cross_entropy(probs, clip.label), probs

    # -- inference ----------------------------------------------------------
    def predict(self, clip: VideoClip, ratio: float = 1.0,
                eval_seed: int = 0,
                raw_flow: Optional[np.ndarray] = None,
                draws: int = 1) -> tuple[int, np.ndarray]:
        """Class id and probabilities from the first floor(r*T) frames.

        ``draws`` > 1 averages the class probabilities over that many
        latent resamples (all taken from the same seeded stream).
        """
        from .data import truncate_ratio
        if draws < 1:
            raise ParameterError(f"draws must be >= 1, got {draws}")
        part = truncate_ratio(clip, ratio)
        if self.config.two_stream:
            if raw_flow is not None:
                flow = raw_flow[:part.n_frames - 1]
            else:
                flow = flow_clip(part.frames)
            obs_flow = normalize_flow(flow)
        else:
            obs_flow = None
        mean, logvar = self.encode(part.frames, obs_flow, training=False)
        rng = np.random.default_rng(derive_seed(eval_seed, clip.id))
        probs = np.zeros(self.config.n_classes)
        for _ in range(draws):
            code = self.reparameterize(mean, logvar,
                                       rng.standard_normal(12))
            probs = probs + self.classify_latent(code).data / draws
        return int(np.argmax(probs)), probs


def _clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data > lo) & (x.data < hi)
    data = np.clip(x.data, lo, hi)
    return ad._make(data, [x], lambda g: (g * mask,))
