"""Learned transition generation and stability analysis.

A head is an LSTM trunk over the previous latent mean (plus optional
control) with two dense heads: one for the transition (linear weights in
deterministic mode, Dirichlet concentrations in resampled mode) and one
for the process noise Q.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .diffmath import ShapeError, Tensor, no_tape, ops, sample_dirichlet
from .nnkit import Dense, LstmCellParams, LstmState, lstm_step

NOISE_FLOOR = 1e-4
ALPHA_FLOOR = 1e-4
ALPHA_JITTER = 0.01
MODES = ("deterministic", "dirichlet")
LAYOUTS = ("diagonal", "full")


class DivergenceError(RuntimeError):
    """An observed rollout norm exceeded its analytic bound."""


@dataclass
class TransitionHead:
    lstm: LstmCellParams
    a_head: Dense
    q_head: Dense
    latent_dim: int
    mode: str = "dirichlet"
    layout: str = "diagonal"
    jitter: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown transition mode {self.mode!r}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        d = self.latent_dim
        want = d if self.layout == "diagonal" else d * d
        if self.a_head.out_dim != want or self.a_head.in_dim != self.lstm.hidden:
            raise ShapeError(f"A head is {self.a_head.in_dim}->{self.a_head.out_dim}, expected {self.lstm.hidden}->{want}")
        if self.q_head.out_dim != d or self.q_head.in_dim != self.lstm.hidden:
            raise ShapeError(f"Q head is {self.q_head.in_dim}->{self.q_head.out_dim}, expected {self.lstm.hidden}->{d}")
        if self.lstm.in_dim < d:
            raise ShapeError(f"LSTM input {self.lstm.in_dim} is narrower than latent dim {d}")

    @property
    def control_dim(self) -> int:
        return self.lstm.in_dim - self.latent_dim

    @classmethod
    def init(cls, latent_dim: int, rng, mode: str = "dirichlet", layout: str = "diagonal",
             hidden: int | None = None, control_dim: int = 0, jitter: bool = False) -> "TransitionHead":
        hidden = latent_dim if hidden is None else hidden
        width = latent_dim if layout == "diagonal" else latent_dim * latent_dim
        return cls(
            LstmCellParams.init(latent_dim + control_dim, hidden, rng.child(0)),
            Dense.init(hidden, width, rng.child(1)),
            Dense.init(hidden, latent_dim, rng.child(2)),
            latent_dim, mode, layout, jitter,
        )

    @classmethod
    def zeros(cls, latent_dim: int, mode: str = "dirichlet", layout: str = "diagonal",
              hidden: int | None = None, control_dim: int = 0) -> "TransitionHead":
        hidden = latent_dim if hidden is None else hidden
        width = latent_dim if layout == "diagonal" else latent_dim * latent_dim
        return cls(LstmCellParams.zeros(latent_dim + control_dim, hidden), Dense.zeros(hidden, width),
                   Dense.zeros(hidden, latent_dim), latent_dim, mode, layout)

    def initial_state(self, batch: int = 1) -> LstmState:
        return LstmState.zeros(self.lstm.hidden, batch)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            **self.lstm.parameters(f"{prefix}lstm."),
            **self.a_head.parameters(f"{prefix}a_head."),
            **self.q_head.parameters(f"{prefix}q_head."),
        }


@dataclass
class TransitionPacket:
    """A is (B, d) in diagonal layout or (B, d, d) in full layout; Q is (B, d)."""

    A: Tensor
    Q: Tensor
    provenance: str
    alpha: np.ndarray | None
    state: LstmState
    layout: str


def _trunk(head: TransitionHead, z_prev, state: LstmState, control) -> tuple[Tensor, LstmState]:
    z_prev = z_prev if isinstance(z_prev, Tensor) else Tensor(z_prev)
    if z_prev.ndim != 2 or z_prev.shape[1] != head.latent_dim:
        raise ShapeError(f"transition: z_prev shape {z_prev.shape} does not match latent dim {head.latent_dim}")
    inp = z_prev
    if head.control_dim:
        if control is None:
            raise ValueError(f"head expects a control input of width {head.control_dim}")
        inp = ops.concat([z_prev, control if isinstance(control, Tensor) else Tensor(control)], axis=1)
    h, state = lstm_step(head.lstm, inp, state)
    return h, state


def _shape_a(head: TransitionHead, flat: Tensor) -> Tensor:
    if head.layout == "full":
        d = head.latent_dim
        return ops.reshape(flat, (flat.shape[0], d, d))
    return flat


def deterministic_transition(head: TransitionHead, z_prev, state: LstmState, control=None) -> TransitionPacket:
    h, state = _trunk(head, z_prev, state, control)
    A = _shape_a(head, head.a_head(h))
    Q = ops.relu(head.q_head(h)) + NOISE_FLOOR
    return TransitionPacket(A, Q, "deterministic", None, state, head.layout)


def dirichlet_transition(head: TransitionHead, z_prev, state: LstmState, rng, control=None) -> TransitionPacket:
    """alpha = relu(a_head(h) [+ N(0, 0.01)]) + 1e-4, A ~ Dirichlet(alpha) over all d (or d*d) entries."""
    h, state = _trunk(head, z_prev, state, control)
    pre = head.a_head(h)
    if head.jitter:
        pre = pre + ALPHA_JITTER * rng.normal(pre.shape)
    alpha = ops.relu(pre) + ALPHA_FLOOR
    assert (alpha.value > 0).all(), "concentration floor violated"
    A = _shape_a(head, sample_dirichlet(alpha, rng))
    Q = ops.relu(head.q_head(h)) + NOISE_FLOOR
    return TransitionPacket(A, Q, "dirichlet", alpha.value.copy(), state, head.layout)


def generate_transition(head: TransitionHead, z_prev, state: LstmState, rng=None, control=None) -> TransitionPacket:
    if head.mode == "dirichlet":
        if rng is None:
            raise ValueError("Dirichlet transitions need a random stream")
        return dirichlet_transition(head, z_prev, state, rng, control)
    return deterministic_transition(head, z_prev, state, control)


@dataclass
class StabilityReport:
    inf_norm: float
    spectral_radius: float
    row_sums: list[float]
    verdict: str

    @property
    def contractive(self) -> bool:
        return self.verdict == "contractive"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def spectral_radius_estimate(A: np.ndarray, iterations: int = 200) -> float:
    """Power iteration; the geometric-mean growth over the second half also
    handles a complex dominant pair, where the iterate itself never settles."""
    d = A.shape[0]
    x = np.ones(d) / np.sqrt(d)
    logs = []
    for _ in range(iterations):
        y = A @ x
        n = np.linalg.norm(y)
        if n == 0.0:
            return 0.0
        logs.append(np.log(n))
        x = y / n
    tail = logs[iterations // 2 :]
    return float(np.exp(np.mean(tail)))


def stability_check(A) -> StabilityReport:
    """Max absolute row sum and spectral radius; contractive iff ||A||_inf < 1."""
    A = np.asarray(A.value if isinstance(A, Tensor) else A, dtype=float)
    if A.ndim == 1:
        rows = np.abs(A)
        radius = float(rows.max(initial=0.0))
    elif A.ndim == 2 and A.shape[0] == A.shape[1]:
        rows = np.abs(A).sum(axis=1)
        radius = spectral_radius_estimate(A)
    else:
        raise ShapeError(f"stability_check needs a square matrix or a diagonal vector, got {A.shape}")
    inf_norm = float(rows.max(initial=0.0))
    return StabilityReport(inf_norm, radius, [float(r) for r in rows], "contractive" if inf_norm < 1 else "not-contractive")


@dataclass
class RolloutReport:
    norms: np.ndarray
    bound: np.ndarray
    max_inf_norm: float


def rollout_decay(source: Callable[[np.ndarray], np.ndarray], z0, M: int, slack: float = 1e-12) -> RolloutReport:
    """Iterate z_{k+1} = A_k z_k with A_k = source(z_k).

    The bound at step k is (max_{j<k} ||A_j||_inf)^k ||z0||_inf.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    z = np.asarray(z0, dtype=float).copy()
    if not np.isfinite(z).all():
        raise ValueError("z0 must be finite")
    z_inf = float(np.abs(z).max())
    norms, bound = [z_inf], [z_inf]
    worst = 0.0
    for k in range(1, M + 1):
        A = np.asarray(source(z), dtype=float)
        worst = max(worst, stability_check(A).inf_norm)
        z = A * z if A.ndim == 1 else A @ z
        norms.append(float(np.abs(z).max()))
        bound.append(worst**k * z_inf)
        if norms[-1] > bound[-1] + slack:
            raise DivergenceError(f"step {k}: |z|_inf={norms[-1]:.3e} exceeds bound {bound[-1]:.3e}")
    return RolloutReport(np.array(norms), np.array(bound), worst)


def head_source(head: TransitionHead, rng=None, control=None) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a transition head as a rollout source, threading its LSTM state."""
    state = head.initial_state(1)

    def source(z: np.ndarray) -> np.ndarray:
        nonlocal state
        with no_tape():
            pkt = generate_transition(head, z.reshape(1, -1), state, rng, control)
        state = pkt.state
        return pkt.A.value[0]

    return source
