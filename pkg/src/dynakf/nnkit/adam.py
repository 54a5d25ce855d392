"""Adam with bias correction over a dict of named tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..diffmath import ShapeError, Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")


def adam_step(adam: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> AdamState:
    """Update ``params`` in place (fresh value arrays) and advance ``adam``.

    All gradients are validated before anything is modified.
    """
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)
    adam.step += 1
    t = adam.step
    c1 = 1.0 - adam.beta1**t
    c2 = 1.0 - adam.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = adam.m.get(name)
        v = adam.v.get(name)
        m = (1.0 - adam.beta1) * g if m is None else adam.beta1 * m + (1.0 - adam.beta1) * g
        v = (1.0 - adam.beta2) * g * g if v is None else adam.beta2 * v + (1.0 - adam.beta2) * g * g
        adam.m[name], adam.v[name] = m, v
        p.value = p.value - adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    return adam
