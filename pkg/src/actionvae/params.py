"""Named trainable parameters, initialization, and the weight penalty.

Names use dotted paths ending in ``.w`` (weight) or ``.b`` (bias); only
``.w`` entries enter the L2 penalty.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, mul, tsum, add


class ParameterSet:
    """Ordered name -> Tensor mapping of all trainable variables."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def weights(self) -> list[Tensor]:
        return [t for n, t in self._params.items() if n.endswith(".w")]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """N(0, std) resampled until every draw lies within +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


WEIGHT_STD = 0.1
BIAS_STD = 0.01


def init_value(rng: np.random.Generator, name: str, shape) -> np.ndarray:
    std = WEIGHT_STD if name.endswith(".w") else BIAS_STD
    return truncated_normal(rng, shape, std)


def l2_penalty(params: ParameterSet) -> Tensor:
    """Half the squared Frobenius norm of all weights (biases excluded)."""
    total = Tensor(np.asarray(0.0))
    for w in params.weights():
        total = add(total, mul(tsum(mul(w, w)), 0.5))
    return total
