"""Dense layers and multilayer perceptrons."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..diffmath import ShapeError, Tensor, ops

ACTIVATIONS = ("relu", "tanh", "sigmoid", "none")


def glorot_uniform(fan_in: int, fan_out: int, rng, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return limit * (2.0 * rng.uniform(shape) - 1.0)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ops.relu(x)
    if kind == "tanh":
        return ops.tanh(x)
    if kind == "sigmoid":
        return ops.sigmoid(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass
class Dense:
    """Affine map ``x @ weight + bias`` followed by an activation.

    ``weight`` is stored (in_dim, out_dim) so batches are rows.
    """

    weight: Tensor
    bias: Tensor
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"dense: weight {self.weight.shape} and bias {self.bias.shape} do not conform")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng, activation: str = "none", bias: float = 0.0) -> "Dense":
        return cls(Tensor(glorot_uniform(in_dim, out_dim, rng)), Tensor(np.full(out_dim, float(bias))), activation)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activation: str = "none") -> "Dense":
        return cls(Tensor(np.zeros((in_dim, out_dim))), Tensor(np.zeros(out_dim)), activation)

    def __call__(self, x: Tensor) -> Tensor:
        return activate(ops.affine(x, self.weight, self.bias), self.activation)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


@dataclass
class MlpParams:
    layers: list[Dense] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.out_dim != cur.in_dim:
                raise ShapeError(f"layer {i - 1} outputs {prev.out_dim} but layer {i} expects {cur.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng) -> "MlpParams":
        if len(activations) != len(sizes) - 1:
            raise ValueError(f"{len(sizes) - 1} layers need as many activations, got {len(activations)}")
        return cls([Dense.init(sizes[i], sizes[i + 1], rng.child(i), act) for i, act in enumerate(activations)])

    @classmethod
    def zeros(cls, sizes: Sequence[int], activations: Sequence[str]) -> "MlpParams":
        return cls([Dense.zeros(sizes[i], sizes[i + 1], act) for i, act in enumerate(activations)])

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}{i}."))
        return out


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Apply the network to a single vector (in_dim,) or a batch (B, in_dim)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != params.in_dim or x.ndim not in (1, 2):
        raise ShapeError(f"mlp: input shape {x.shape} does not match in_dim {params.in_dim}")
    single = x.ndim == 1
    h = ops.reshape(x, (1, -1)) if single else x
    for layer in params.layers:
        h = layer(h)
    return ops.reshape(h, (-1,)) if single else h
