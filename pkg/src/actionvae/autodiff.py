"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a vector-Jacobian closure on the
enclosing graph; ``Tape.backward`` replays them in reverse topological
order. All math is double precision so finite-difference checks are
meaningful.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class ParameterError(ValueError):
    """Raised when an operation receives an out-of-range parameter."""


class Tensor:
    """N-dimensional float64 array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name",
                 "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          vjp: Optional[Callable]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


class Tape:
    """Records the reverse sweep over the graph reachable from a loss.

    ``nodes`` is filled in topological order by :meth:`backward`; the
    returned gradient map is keyed by ``id(tensor)`` (mirrored into each
    tensor's ``node_id``/``grad`` fields).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.grads: dict[int, np.ndarray] = {}

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.shape != ():
            raise DimensionError("backward requires a scalar loss, got shape "
                                 f"{loss.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for i, node in enumerate(order):
            node.node_id = i
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        for node in order:
            g = grads.get(id(node))
            if g is not None:
                node.grad = np.asarray(g, dtype=np.float64).reshape(node.shape)
        self.nodes = order
        self.grads = grads
        return grads


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[int, np.ndarray]:
    """Run the reverse sweep from a scalar loss; returns the gradient map."""
    return (tape or Tape()).backward(loss)


# --------------------------------------------------------------------------
# Elementwise and reduction primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if np.isscalar(b) or isinstance(b, (int, float)):
        out = _make(a.data + float(b), [a], lambda g: (g,))
        return out
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} vs {b.shape}")
    return _make(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} vs {b.shape}")
    return _make(a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if np.isscalar(b) or isinstance(b, (int, float)):
        c = float(b)
        return _make(a.data * c, [a], lambda g: (g * c,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}")
    return _make(a.data * b.data, [a, b],
                 lambda g: (g * b.data, g * a.data))


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _make(out_data, [x], lambda g: (g * out_data,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _make(np.asarray(x.data.sum()), [x],
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make(np.asarray(x.data.mean()), [x],
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: {old} -> {shape}")
    return _make(x.data.reshape(shape), [x],
                 lambda g: (g.reshape(old),))


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0 of a 1-D tensor."""
    if x.data.ndim != 1:
        raise DimensionError("slice1d expects a 1-D tensor")
    n = x.shape[0]
    if not (0 <= start <= stop <= n):
        raise ParameterError(f"slice1d bounds [{start}:{stop}] on length {n}")

    def vjp(g):
        gx = np.zeros(n)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop].copy(), [x], vjp)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.size == 0:
        return _make(b.data.copy(), [b], lambda g: (g,))
    if b.size == 0:
        return _make(a.data.copy(), [a], lambda g: (g,))
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: ranks {a.data.ndim} vs {b.data.ndim}")
    for ax, (da, db) in enumerate(zip(a.shape, b.shape)):
        if ax != axis and da != db:
            raise DimensionError(f"concat: shapes {a.shape} vs {b.shape} "
                                 f"differ on axis {ax}")
    na = a.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [na], axis=axis)
        return (ga, gb)

    return _make(np.concatenate([a.data, b.data], axis=axis), [a, b], vjp)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for 1-D input."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError("affine expects x:(n,), weight:(m,n), bias:(m,)")
    m, n = weight.shape
    if x.shape[0] != n or bias.shape[0] != m:
        raise DimensionError(
            f"affine: weight {weight.shape}, x {x.shape}, bias {bias.shape}")

    def vjp(g):
        return (weight.data.T @ g, np.outer(g, x.data), g)

    return _make(weight.data @ x.data + bias.data, [x, weight, bias], vjp)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        return _make(np.where(mask, x.data, 0.0), [x],
                     lambda g: (g * mask,))
    if kind == "sigmoid":
        y = expit(x.data)
        return _make(y, [x], lambda g: (g * y * (1.0 - y),))
    raise ParameterError(f"unknown activation kind {kind!r}")


def dropout(x: Tensor, keep_prob: float, rng_seed: int,
            training: bool) -> Tensor:
    if keep_prob <= 0.0 or keep_prob > 1.0:
        raise ParameterError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return _make(x.data.copy(), [x], lambda g: (g,))
    rng = np.random.default_rng(rng_seed)
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return _make(x.data * mask, [x], lambda g: (g * mask,))


class ConvKernel:
    """Weights (out_channels, in_channels, d, h, w) plus a bias vector."""

    def __init__(self, weights: Tensor, bias: Tensor):
        if weights.data.ndim != 5:
            raise DimensionError("ConvKernel weights must be rank 5")
        if bias.data.ndim != 1:
            raise DimensionError("ConvKernel bias must be rank 1")
        if min(weights.shape) < 1:
            raise DimensionError(f"non-positive kernel dim: {weights.shape}")
        self.weights = weights
        self.bias = bias


def _conv_out_dims(in_dims, k_dims, stride, padding):
    out = []
    for n, k, s, p in zip(in_dims, k_dims, stride, padding):
        span = n + 2 * p - k
        if span < 0:
            raise DimensionError(
                f"kernel size {k} exceeds padded input {n + 2 * p}")
        out.append(span // s + 1)
    return tuple(out)


def _pad4(x: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kdims, stride, out_dims) -> np.ndarray:
    kd, kh, kw = kdims
    sd, sh, sw = stride
    do, ho, wo = out_dims
    c = xp.shape[0]
    cols = np.empty((c, kd, kh, kw, do, ho, wo))
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, a, b, e] = xp[:, a:a + do * sd:sd,
                                      b:b + ho * sh:sh,
                                      e:e + wo * sw:sw]
    return cols.reshape(c * kd * kh * kw, do * ho * wo)


def _col2im(gcols: np.ndarray, padded_shape, kdims, stride,
            out_dims) -> np.ndarray:
    kd, kh, kw = kdims
    sd, sh, sw = stride
    do, ho, wo = out_dims
    c = padded_shape[0]
    gxp = np.zeros(padded_shape)
    gc = gcols.reshape(c, kd, kh, kw, do, ho, wo)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                gxp[:, a:a + do * sd:sd,
                    b:b + ho * sh:sh,
                    e:e + wo * sw:sw] += gc[:, a, b, e]
    return gxp


def _unpad4(xp: np.ndarray, padding, dims) -> np.ndarray:
    pd, ph, pw = padding
    d, h, w = dims
    return xp[:, pd:pd + d, ph:ph + h, pw:pw + w]


def conv3d(x: Tensor, kernel: ConvKernel, stride, padding) -> Tensor:
    """3-D convolution on a (C_in, D, H, W) volume."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv3d input must be rank 4, got {x.shape}")
    w, b = kernel.weights, kernel.bias
    c_out, c_in, kd, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv3d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if b.shape[0] != c_out:
        raise DimensionError(f"conv3d: bias length {b.shape[0]} != {c_out}")
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    if min(stride) < 1:
        raise ParameterError(f"stride components must be >= 1: {stride}")
    in_dims = x.shape[1:]
    out_dims = _conv_out_dims(in_dims, (kd, kh, kw), stride, padding)

    xp = _pad4(x.data, padding)
    cols = _im2col(xp, (kd, kh, kw), stride, out_dims)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols + b.data[:, None]).reshape((c_out,) + out_dims)

    def vjp(g):
        gmat = g.reshape(c_out, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        gb = gmat.sum(axis=1)
        gcols = wmat.T @ gmat
        gxp = _col2im(gcols, xp.shape, (kd, kh, kw), stride, out_dims)
        gx = _unpad4(gxp, padding, in_dims)
        return (gx, gw, gb)

    return _make(out, [x, w, b], vjp)


def deconv3d(x: Tensor, kernel: ConvKernel, stride, padding,
             output_dims) -> Tensor:
    """Transposed 3-D convolution: the exact adjoint of ``conv3d``.

    The kernel's first axis matches the *input* channels here; output has
    ``in_channels`` channels and ``bias`` must have that length.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"deconv3d input must be rank 4, got {x.shape}")
    w, b = kernel.weights, kernel.bias
    c_fwd_out, c_fwd_in, kd, kh, kw = w.shape
    if x.shape[0] != c_fwd_out:
        raise DimensionError(
            f"deconv3d: input has {x.shape[0]} channels, kernel expects "
            f"{c_fwd_out}")
    if b.shape[0] != c_fwd_in:
        raise DimensionError(
            f"deconv3d: bias length {b.shape[0]} != {c_fwd_in}")
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    output_dims = tuple(int(d) for d in output_dims)
    expect = _conv_out_dims(output_dims, (kd, kh, kw), stride, padding)
    if expect != x.shape[1:]:
        raise DimensionError(
            f"deconv3d: output_dims {output_dims} imply input dims {expect}, "
            f"got {x.shape[1:]}")

    pd, ph, pw = padding
    padded_shape = (c_fwd_in, output_dims[0] + 2 * pd,
                    output_dims[1] + 2 * ph, output_dims[2] + 2 * pw)
    wmat = w.data.reshape(c_fwd_out, -1)
    xmat = x.data.reshape(c_fwd_out, -1)
    gcols = wmat.T @ xmat
    out = _unpad4(_col2im(gcols, padded_shape, (kd, kh, kw), stride,
                          x.shape[1:]),
                  padding, output_dims) + b.data[:, None, None, None]

    def vjp(g):
        gp = _pad4(g, padding)
        cols = _im2col(gp, (kd, kh, kw), stride, x.shape[1:])
        gx = (wmat @ cols).reshape(x.shape)
        gw = (xmat @ cols.T).reshape(w.shape)
        gb = g.reshape(c_fwd_in, -1).sum(axis=1)
        return (gx, gw, gb)

    return _make(out, [x, w, b], vjp)


def spp_pool(x: Tensor, bins: Sequence[int]) -> Tensor:
    """Spatial pyramid max pooling over a (C, D, H, W) volume.

    Time is collapsed by max first, then each bin count b tiles the plane
    into a b x b grid with boundaries at round(i*H/b); cell maxima are
    concatenated channel-major.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"spp_pool input must be rank 4, got {x.shape}")
    c, d, h, w = x.shape
    bins = [int(b) for b in bins]
    for b in bins:
        if b > h or b > w:
            raise DimensionError(f"bin {b} exceeds spatial dims ({h}, {w})")

    flat = x.data.reshape(c, d, h * w)
    targ = flat.argmax(axis=1)                       # (C, H*W)
    tmax = np.take_along_axis(flat, targ[:, None, :], axis=1)[:, 0, :]
    tmax = tmax.reshape(c, h, w)

    width = sum(b * b for b in bins)
    out = np.empty(c * width)
    # (channel, depth index, row, col) of each output element's source
    src = np.empty((c * width, 4), dtype=np.int64)
    k = 0
    for ch in range(c):
        for b in bins:
            rb = [round(i * h / b) for i in range(b + 1)]
            cb = [round(j * w / b) for j in range(b + 1)]
            for i in range(b):
                for j in range(b):
                    cell = tmax[ch, rb[i]:rb[i + 1], cb[j]:cb[j + 1]]
                    ci, cj = np.unravel_index(cell.argmax(), cell.shape)
                    r, q = rb[i] + ci, cb[j] + cj
                    out[k] = cell[ci, cj]
                    src[k] = (ch, targ[ch, r * w + q], r, q)
                    k += 1

    def vjp(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, (src[:, 0], src[:, 1], src[:, 2], src[:, 3]), g)
        return (gx,)

    return _make(out, [x], vjp)


# --------------------------------------------------------------------------
# Heads and losses
# --------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 1 or logits.size < 1:
        raise DimensionError("softmax expects a non-empty 1-D tensor")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def vjp(g):
        return (p * (g - float(g @ p)),)

    return _make(p, [logits], vjp)


def cross_entropy(probs: Tensor, label: int) -> Tensor:
    if probs.data.ndim != 1:
        raise DimensionError("cross_entropy expects a 1-D probability vector")
    n = probs.shape[0]
    if not (0 <= label < n):
        raise ParameterError(f"label {label} out of range [0, {n})")
    p = max(float(probs.data[label]), 1e-300)

    def vjp(g):
        gp = np.zeros(n)
        gp[label] = -float(g) / p
        return (gp,)

    return _make(np.asarray(-np.log(p)), [probs], vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = pred.size

    def vjp(g):
        gd = (2.0 / n) * diff * float(g)
        return (gd, -gd)

    return _make(np.asarray((diff * diff).mean()), [pred, target], vjp)


def kl_std_normal(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL( N(mean, diag exp(logvar)) || N(0, I) ), closed form."""
    if mean.shape != logvar.shape:
        raise DimensionError(
            f"kl_std_normal: shapes {mean.shape} vs {logvar.shape}")
    ev = np.exp(logvar.data)
    val = 0.5 * np.sum(mean.data ** 2 + ev - logvar.data - 1.0)

    def vjp(g):
        return (float(g) * mean.data, float(g) * 0.5 * (ev - 1.0))

    return _make(np.asarray(val), [mean, logvar], vjp)


# --------------------------------------------------------------------------
# Verification
# --------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a scalar Tensor given the input tensors.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    Tape().backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*inputs).item()
            flat[i] = orig - eps
            dn = f(*inputs).item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
