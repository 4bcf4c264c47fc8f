"""Dense TV-L1 optical flow (duality-based, coarse-to-fine with warping).

Produces the temporal-stream input and the ground truth for the
future-flow decoder head. Everything runs on plain float64 arrays; flow
estimation does not participate in autodiff.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import DimensionError, ParameterError

LUMA = (0.299, 0.587, 0.114)
FLOW_CLAMP = 20.0  # px; network inputs are rescaled from [-20, 20] to [0, 1]


@dataclass
class TvL1Params:
    lambda_data: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    warps: int = 5
    max_iters_per_warp: int = 300
    pyramid_scale: float = 0.5
    pyramid_levels: int = 0          # 0 = auto, shrink until min dim < 16
    stop_eps: float = 0.01

    def __post_init__(self):
        if self.tau > 0.25:
            raise ParameterError("tau must be <= 0.25 for dual stability")
        if not (0.0 < self.pyramid_scale < 1.0):
            raise ParameterError("pyramid_scale must lie in (0, 1)")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    # per-warp true-energy trace at the finest pyramid level
    energy_history: list = field(default_factory=list)

    @property
    def shape(self):
        return self.u.shape


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize of a 2-D image."""
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample img at real coordinates (x, y), clamped at the borders."""
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return (img[y0, x0] * (1 - fy) * (1 - fx)
            + img[y0, x1] * (1 - fy) * fx
            + img[y1, x0] * fy * (1 - fx)
            + img[y1, x1] * fy * fx)


def warp_image(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp img by the flow: output(y, x) = img(y + v, x + u)."""
    if img.shape != flow.u.shape:
        raise DimensionError(
            f"warp_image: image {img.shape} vs flow {flow.u.shape}")
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return bilinear_sample(img, xx + flow.u, yy + flow.v)


def _forward_grad(m):
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[:, :-1] = m[:, 1:] - m[:, :-1]
    dy[:-1, :] = m[1:, :] - m[:-1, :]
    return dx, dy


def _divergence(px, py):
    div = np.zeros_like(px)
    div[:, 0] += px[:, 0]
    div[:, 1:] += px[:, 1:] - px[:, :-1]
    div[0, :] += py[0, :]
    div[1:, :] += py[1:, :] - py[:-1, :]
    return div


def tv_l1_energy(i0: np.ndarray, i1: np.ndarray, u: np.ndarray,
                 v: np.ndarray, lambda_data: float) -> float:
    """True (non-linearized) TV-L1 objective for a candidate flow."""
    ux, uy = _forward_grad(u)
    vx, vy = _forward_grad(v)
    tv = np.sqrt(ux ** 2 + uy ** 2).sum() + np.sqrt(vx ** 2 + vy ** 2).sum()
    residual = warp_image(i1, FlowField(u, v)) - i0
    return float(tv + lambda_data * np.abs(residual).sum())


def _solve_level(i0, i1, u, v, params: TvL1Params, trace=None):
    h, w = i0.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    i1y, i1x = np.gradient(i1)
    lt = params.lambda_data * params.theta
    taut = params.tau / params.theta

    for _ in range(params.warps):
        energy_in = tv_l1_energy(i0, i1, u, v, params.lambda_data)
        u0, v0 = u.copy(), v.copy()
        i1w = bilinear_sample(i1, xx + u0, yy + v0)
        gx = bilinear_sample(i1x, xx + u0, yy + v0)
        gy = bilinear_sample(i1y, xx + u0, yy + v0)
        grad_sq = gx ** 2 + gy ** 2
        rho_c = i1w - gx * u0 - gy * v0 - i0
        p11 = np.zeros_like(u)
        p12 = np.zeros_like(u)
        p21 = np.zeros_like(u)
        p22 = np.zeros_like(u)
        uc, vc = u.copy(), v.copy()

        for _ in range(params.max_iters_per_warp):
            rho = rho_c + gx * uc + gy * vc
            # soft-thresholding of the L1 data term
            d1 = np.where(rho < -lt * grad_sq, lt * gx,
                          np.where(rho > lt * grad_sq, -lt * gx,
                                   np.where(grad_sq > 1e-12,
                                            -rho * gx / np.maximum(grad_sq, 1e-12),
                                            0.0)))
            d2 = np.where(rho < -lt * grad_sq, lt * gy,
                          np.where(rho > lt * grad_sq, -lt * gy,
                                   np.where(grad_sq > 1e-12,
                                            -rho * gy / np.maximum(grad_sq, 1e-12),
                                            0.0)))
            au = uc + d1
            av = vc + d2
            un = au + params.theta * _divergence(p11, p12)
            vn = av + params.theta * _divergence(p21, p22)
            change = (np.abs(un - uc).mean() + np.abs(vn - vc).mean())
            scale = max(np.abs(un).mean() + np.abs(vn).mean(), 1e-6)
            uc, vc = un, vn
            ux, uy_ = _forward_grad(uc)
            vx, vy_ = _forward_grad(vc)
            ng1 = 1.0 + taut * np.sqrt(ux ** 2 + uy_ ** 2)
            ng2 = 1.0 + taut * np.sqrt(vx ** 2 + vy_ ** 2)
            p11 = (p11 + taut * ux) / ng1
            p12 = (p12 + taut * uy_) / ng1
            p21 = (p21 + taut * vx) / ng2
            p22 = (p22 + taut * vy_) / ng2
            if change / scale < params.stop_eps:
                break

        energy_out = tv_l1_energy(i0, i1, uc, vc, params.lambda_data)
        # keep the better of old and new, so warps never raise the objective
        if energy_out <= energy_in:
            u, v = uc, vc
            kept = energy_out
        else:
            kept = energy_in
        if trace is not None:
            trace.append(kept)
    return u, v


def _num_levels(h, w, params: TvL1Params) -> int:
    if params.pyramid_levels > 0:
        return params.pyramid_levels
    levels = 1
    s = params.pyramid_scale
    while min(h, w) * s ** levels >= 16:
        levels += 1
    return levels


def tv_l1(prev: np.ndarray, next_: np.ndarray,
          params: Optional[TvL1Params] = None) -> FlowField:
    """Coarse-to-fine TV-L1 flow from prev to next."""
    params = params or TvL1Params()
    if prev.shape != next_.shape:
        raise DimensionError(
            f"tv_l1: frame shapes {prev.shape} vs {next_.shape}")
    h, w = prev.shape
    if h < 8 or w < 8:
        raise DimensionError(f"tv_l1: frames too small ({h}, {w})")

    levels = _num_levels(h, w, params)
    # the parameter defaults are calibrated for 8-bit intensity scale;
    # inputs arrive in [0, 1], so solve on a 0-255 copy
    pyramid = [(prev.astype(float) * 255.0, next_.astype(float) * 255.0)]
    for _ in range(levels - 1):
        p0, p1 = pyramid[-1]
        nh = max(8, int(round(p0.shape[0] * params.pyramid_scale)))
        nw = max(8, int(round(p0.shape[1] * params.pyramid_scale)))
        pyramid.append((bilinear_resize(p0, nh, nw),
                        bilinear_resize(p1, nh, nw)))

    u = np.zeros(pyramid[-1][0].shape)
    v = np.zeros_like(u)
    history: list = []
    for li in range(levels - 1, -1, -1):
        i0, i1 = pyramid[li]
        if u.shape != i0.shape:
            fy = i0.shape[0] / u.shape[0]
            fx = i0.shape[1] / u.shape[1]
            u = bilinear_resize(u, *i0.shape) * fx
            v = bilinear_resize(v, *i0.shape) * fy
        trace = history if li == 0 else None
        u, v = _solve_level(i0, i1, u, v, params, trace=trace)
    return FlowField(u, v, energy_history=history)


def to_grayscale(frames: np.ndarray) -> np.ndarray:
    """(T, H, W, C) -> (T, H, W) using standard luma weights."""
    if frames.shape[-1] == 1:
        return frames[..., 0]
    r, g, b = LUMA
    return r * frames[..., 0] + g * frames[..., 1] + b * frames[..., 2]


def flow_clip(frames: np.ndarray,
              params: Optional[TvL1Params] = None) -> np.ndarray:
    """TV-L1 flow for every consecutive frame pair: (T-1, H, W, 2)."""
    if frames.shape[0] < 2:
        raise DimensionError("flow_clip requires a clip of length >= 2")
    gray = to_grayscale(frames)
    fields = []
    for t in range(frames.shape[0] - 1):
        f = tv_l1(gray[t], gray[t + 1], params)
        fields.append(np.stack([f.u, f.v], axis=-1))
    return np.stack(fields, axis=0)


def normalize_flow(flow: np.ndarray, clamp: float = FLOW_CLAMP) -> np.ndarray:
    """Clamp displacements to [-clamp, clamp] and rescale into [0, 1]."""
    return (np.clip(flow, -clamp, clamp) + clamp) / (2.0 * clamp)
