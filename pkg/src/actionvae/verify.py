"""Finite-difference verification suite covering every differentiable op.

Each check builds a small random instance, runs the tape backward, and
compares against central differences via ``grad_check``. The composite
check differentiates the full fused training loss with respect to a
parameter slice. ``corrupt=True`` swaps in an op with a deliberately
wrong gradient so the detector itself can be exercised.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConvKernel, ParameterError, Tensor

TOLERANCE = 1e-4


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(abs(hash(name)) % (2 ** 31))


def _t(rng, *shape, offset: float = 0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


def _check_add() -> float:
    rng = _rng("add")
    a, b = _t(rng, 6), _t(rng, 6)
    return ad.grad_check(lambda a, b: ad.tsum(ad.add(a, b)), [a, b])


def _check_sub() -> float:
    rng = _rng("sub")
    a, b = _t(rng, 6), _t(rng, 6)
    return ad.grad_check(lambda a, b: ad.tsum(ad.sub(a, b)), [a, b])


def _check_mul() -> float:
    rng = _rng("mul")
    a, b = _t(rng, 6), _t(rng, 6)
    return ad.grad_check(lambda a, b: ad.tsum(ad.mul(a, b)), [a, b])


def _check_exp() -> float:
    a = _t(_rng("exp"), 6)
    return ad.grad_check(lambda a: ad.tsum(ad.exp(a)), [a])


def _check_tsum() -> float:
    a = _t(_rng("tsum"), 3, 4)
    return ad.grad_check(lambda a: ad.tsum(a), [a])


def _check_tmean() -> float:
    a = _t(_rng("tmean"), 3, 4)
    return ad.grad_check(lambda a: ad.tmean(a), [a])


def _check_reshape() -> float:
    a = _t(_rng("reshape"), 2, 6)
    return ad.grad_check(lambda a: ad.tsum(ad.mul(ad.reshape(a, (3, 4)),
                                                  2.0)), [a])


def _check_slice1d() -> float:
    a = _t(_rng("slice1d"), 8)
    return ad.grad_check(
        lambda a: ad.tsum(ad.mul(ad.slice1d(a, 2, 6), ad.slice1d(a, 2, 6))),
        [a])


def _check_concat() -> float:
    rng = _rng("concat")
    a, b = _t(rng, 4), _t(rng, 3)
    return ad.grad_check(
        lambda a, b: ad.tsum(ad.exp(ad.concat(a, b, axis=0))), [a, b])


def _check_affine() -> float:
    rng = _rng("affine")
    x, w, b = _t(rng, 5), _t(rng, 3, 5), _t(rng, 3)
    return ad.grad_check(
        lambda x, w, b: ad.tsum(ad.exp(ad.affine(x, w, b))), [x, w, b])


def _check_relu() -> float:
    # keep probes away from the kink at 0
    rng = _rng("relu")
    a = Tensor(np.where(rng.standard_normal(8) > 0, 1.0, -1.0)
               + 0.3 * rng.standard_normal(8), requires_grad=True)
    return ad.grad_check(
        lambda a: ad.tsum(ad.mul(ad.activation(a, "relu"), 1.5)), [a])


def _check_sigmoid() -> float:
    a = _t(_rng("sigmoid"), 8)
    return ad.grad_check(
        lambda a: ad.tsum(ad.activation(a, "sigmoid")), [a])


def _check_dropout() -> float:
    a = _t(_rng("dropout"), 40)
    return ad.grad_check(
        lambda a: ad.tsum(ad.mul(ad.dropout(a, 0.8, 7, True), a)), [a])


def _check_conv3d() -> float:
    rng = _rng("conv3d")
    x = _t(rng, 2, 3, 5, 5)
    w, b = _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)
    return ad.grad_check(
        lambda x, w, b: ad.tsum(ad.exp(ad.mul(ad.conv3d(
            x, ConvKernel(w, b), (1, 2, 2), (1, 1, 1)), 0.3))), [x, w, b])


def _check_deconv3d() -> float:
    rng = _rng("deconv3d")
    x = _t(rng, 3, 1, 3, 3)
    w, b = _t(rng, 3, 2, 1, 3, 3), _t(rng, 2)
    return ad.grad_check(
        lambda x, w, b: ad.tsum(ad.activation(ad.deconv3d(
            x, ConvKernel(w, b), (1, 2, 2), (0, 1, 1), (1, 6, 6)),
            "sigmoid")), [x, w, b])


def _check_spp_pool() -> float:
    # distinct values keep the per-cell argmax stable under probing
    rng = _rng("spp")
    base = rng.permutation(2 * 2 * 8 * 8).astype(float).reshape(2, 2, 8, 8)
    x = Tensor(base + 0.1 * rng.standard_normal(base.shape),
               requires_grad=True)
    return ad.grad_check(
        lambda x: ad.tsum(ad.mul(ad.spp_pool(x, (4, 2, 1)), 0.01)), [x],
        eps=1e-4)


def _check_softmax() -> float:
    a = _t(_rng("softmax"), 6)
    return ad.grad_check(
        lambda a: ad.tsum(ad.mul(ad.softmax(a), ad.softmax(a))), [a])


def _check_cross_entropy() -> float:
    a = _t(_rng("xent"), 6)
    return ad.grad_check(
        lambda a: ad.cross_entropy(ad.softmax(a), 2), [a])


def _check_mse() -> float:
    rng = _rng("mse")
    p, t = _t(rng, 12), _t(rng, 12)
    return ad.grad_check(lambda p, t: ad.mse(p, t), [p, t])


def _check_kl() -> float:
    rng = _rng("kl")
    mean, logvar = _t(rng, 6), Tensor(0.5 * rng.standard_normal(6),
                                      requires_grad=True)
    return ad.grad_check(
        lambda m, lv: ad.kl_std_normal(m, lv), [mean, logvar])


def _check_composite() -> float:
    """Full fused loss (reconstruction + KL + weight penalty)."""
    from .data import SynthConfig, gen_dataset
    from .model import EncoderConfig, Model, ModelConfig

    clip = gen_dataset(SynthConfig(n_classes=2, clips_per_class=1,
                                   frame_dims=(6, 8, 8), seed=21))[0]
    enc = EncoderConfig(input_dims=(6, 8, 8), conv_channels=(2, 2, 2, 4),
                        strides=((1, 1, 1),) * 4, keep_prob=0.9)
    model = Model(ModelConfig(encoder=enc, heads=("short",), n_classes=2,
                              two_stream=True, deconv_channels=(2, 2, 2, 2)),
                  seed=21)
    from .flow import flow_clip
    raw_flow = flow_clip(clip.frames)

    def f(*_):
        total, _bd = model.clip_loss(clip, raw_flow, (1.0, 0.1, 0.001),
                                     noise_seed=21, training=True)
        return total

    probes = [model.params["enc.mean.b"], model.params["enc.logvar.b"],
              model.params["dec.short.deconv4.b"]]
    return ad.grad_check(f, probes, eps=1e-4)


def _check_corrupted() -> float:
    """Exponential with a deliberately miscaled gradient (detector probe)."""
    a = _t(_rng("corrupt"), 6)

    def bad_exp(x):
        out = np.exp(x.data)
        return ad._make(out, [x], lambda g: (g * out * 1.01,))

    return ad.grad_check(lambda a: ad.tsum(bad_exp(a)), [a])


CHECKS: dict[str, Callable[[], float]] = {
    "add": _check_add, "sub": _check_sub, "mul": _check_mul,
    "exp": _check_exp, "tsum": _check_tsum, "tmean": _check_tmean,
    "reshape": _check_reshape, "slice1d": _check_slice1d,
    "concat": _check_concat, "affine": _check_affine,
    "relu": _check_relu, "sigmoid": _check_sigmoid,
    "dropout": _check_dropout, "conv3d": _check_conv3d,
    "deconv3d": _check_deconv3d, "spp_pool": _check_spp_pool,
    "softmax": _check_softmax, "cross_entropy": _check_cross_entropy,
    "mse": _check_mse, "kl_std_normal": _check_kl,
    "composite_loss": _check_composite,
}


def gradcheck_suite(ops: Optional[Sequence[str]] = None,
                    corrupt: bool = False) -> list[tuple[str, float, bool]]:
    """Run the suite; returns (op, max_rel_err, passed) per check."""
    names = list(CHECKS) if not ops else list(ops)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ParameterError(f"unknown gradcheck ops: {unknown} "
                             f"(choose from {sorted(CHECKS)})")
    results = []
    for name in names:
        err = CHECKS[name]()
        results.append((name, err, err < TOLERANCE))
    if corrupt:
        err = _check_corrupted()
        results.append(("corrupted_hook", err, err < TOLERANCE))
    return results
