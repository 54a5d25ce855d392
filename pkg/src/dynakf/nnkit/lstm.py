"""Single LSTM cell with fused gate weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffmath import ShapeError, Tensor, ops
from .mlp import glorot_uniform

GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"lstm state: h {self.h.shape} and c {self.c.shape} differ")

    @classmethod
    def zeros(cls, hidden: int, batch: int = 1) -> "LstmState":
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


@dataclass
class LstmCellParams:
    """Gate weights stacked column-wise in the order input, forget, cell, output.

    ``w_input`` is (d_in, 4h), ``w_hidden`` is (h, 4h), ``bias`` is (4h,).
    Gate block k occupies columns [k*h, (k+1)*h).
    """

    w_input: Tensor
    w_hidden: Tensor
    bias: Tensor

    def __post_init__(self):
        h4 = self.bias.shape[0] if self.bias.ndim == 1 else -1
        if h4 % 4 or self.w_input.shape[1:] != (h4,) or self.w_hidden.shape != (h4 // 4, h4):
            raise ShapeError(
                f"lstm: w_input {self.w_input.shape}, w_hidden {self.w_hidden.shape}, bias {self.bias.shape} do not conform"
            )

    @property
    def hidden(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_input.shape[0]

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng, forget_bias: float = 1.0) -> "LstmCellParams":
        w_in = np.concatenate([glorot_uniform(in_dim, hidden, rng.child(0, k)) for k in range(4)], axis=1)
        lim = 1.0 / np.sqrt(hidden)
        w_h = lim * (2.0 * rng.child(1).uniform((hidden, 4 * hidden)) - 1.0)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        return cls(Tensor(w_in), Tensor(w_h), Tensor(b))

    @classmethod
    def zeros(cls, in_dim: int, hidden: int) -> "LstmCellParams":
        return cls(Tensor(np.zeros((in_dim, 4 * hidden))), Tensor(np.zeros((hidden, 4 * hidden))), Tensor(np.zeros(4 * hidden)))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_input": self.w_input, f"{prefix}w_hidden": self.w_hidden, f"{prefix}bias": self.bias}


def lstm_gates(params: LstmCellParams, x: Tensor, state: LstmState) -> dict[str, Tensor]:
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"lstm: input shape {x.shape} does not match in_dim {params.in_dim}")
    if state.h.shape != (x.shape[0], params.hidden):
        raise ShapeError(f"lstm: state shape {state.h.shape} does not match batch {x.shape[0]} x hidden {params.hidden}")
    h = params.hidden
    pre = ops.affine(x, params.w_input, params.bias) + ops.matmul(state.h, params.w_hidden)
    return {
        "input": ops.sigmoid(pre[:, 0:h]),
        "forget": ops.sigmoid(pre[:, h : 2 * h]),
        "cell": ops.tanh(pre[:, 2 * h : 3 * h]),
        "output": ops.sigmoid(pre[:, 3 * h : 4 * h]),
    }


def lstm_step(params: LstmCellParams, x, state: LstmState) -> tuple[Tensor, LstmState]:
    """One step: c' = f*c + i*g, h' = o*tanh(c'). Inputs are batches (B, d_in)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    g = lstm_gates(params, x, state)
    c = g["forget"] * state.c + g["input"] * g["cell"]
    h = g["output"] * ops.tanh(c)
    return h, LstmState(h, c)
