"""Differentiable Kalman predict/update over batched latent beliefs.

Two layouts are supported:

* ``diagonal``: A, P, Q, R are (B, d)/(B, m) vectors and every update is
  elementwise through the selection H.
* ``full``: A and P are (B, d, d); Q and R may be vectors (diagonal
  covariances) or full matrices.  S is solved through a Cholesky factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .diffmath import ShapeError, Tensor, ops
from .emission import EmissionMatrix, ObservationPacket, emission_for_packet
from .transition import TransitionPacket


@dataclass
class LatentBelief:
    z: Tensor
    P: Tensor
    t: int
    layout: str = "diagonal"

    @property
    def batch(self) -> int:
        return self.z.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.z.shape[1]

    def diag_P(self) -> np.ndarray:
        return self.P.value if self.layout == "diagonal" else np.diagonal(self.P.value, axis1=-2, axis2=-1)


@dataclass
class InnovationRecord:
    """Residual r (B, m), covariance S, and gain.

    In diagonal layout ``gain`` holds the m nonzero gain entries (B, m);
    in full layout it is the dense K (B, d, m).
    """

    r: Tensor
    S: Tensor
    gain: Tensor
    emission: EmissionMatrix
    layout: str

    @property
    def K(self) -> np.ndarray:
        if self.layout == "full":
            return self.gain.value
        B, m = self.gain.shape
        K = np.zeros((B, self.emission.d, m))
        K[:, list(self.emission.rows), np.arange(m)] = self.gain.value
        return K

    @property
    def k_frobenius(self) -> np.ndarray:
        g = self.gain.value
        return np.sqrt(np.sum(g * g, axis=tuple(range(1, g.ndim))))


def _diag_cov(v: Tensor) -> Tensor:
    return ops.diag_embed(v) if v.ndim == 2 else v


def initial_belief(obs: ObservationPacket, H: EmissionMatrix, layout: str = "diagonal") -> LatentBelief:
    """z0 = H^T a1 and P0 = I; the first filter step then updates against a1."""
    z0 = ops.matmul(obs.features, H.matrix)
    B, d = z0.shape
    P0 = np.ones((B, d)) if layout == "diagonal" else np.broadcast_to(np.eye(d), (B, d, d)).copy()
    return LatentBelief(z0, Tensor(P0), 0, layout)


def predict(belief: LatentBelief, packet: TransitionPacket) -> LatentBelief:
    """z' = A z and P' = A P A^T + Q."""
    z, P, A, Q = belief.z, belief.P, packet.A, packet.Q
    if belief.layout == "diagonal":
        if A.shape != z.shape or Q.shape != P.shape:
            raise ShapeError(f"predict: A {A.shape}, Q {Q.shape} do not match z {z.shape}, P {P.shape}")
        return LatentBelief(A * z, ops.square(A) * P + Q, belief.t + 1, "diagonal")
    B, d = z.shape
    if A.shape != (B, d, d) or P.shape != (B, d, d):
        raise ShapeError(f"predict: full layout needs A and P of shape {(B, d, d)}, got {A.shape} and {P.shape}")
    z_new = ops.reshape(ops.matmul(A, ops.reshape(z, (B, d, 1))), (B, d))
    P_new = ops.matmul(ops.matmul(A, P), ops.transpose(A)) + _diag_cov(Q)
    return LatentBelief(z_new, P_new, belief.t + 1, "full")


def update(prior: LatentBelief, obs: ObservationPacket, H: EmissionMatrix) -> tuple[LatentBelief, InnovationRecord]:
    """r = a - H z', S = R + H P' H^T, K = P' H^T S^-1, z = z' + K r, P = (I - K H) P'."""
    a, R = obs.features, obs.noise
    if a is None or a.shape[1] != H.m or H.d != prior.latent_dim:
        raise ShapeError(f"update: features {None if a is None else a.shape} do not match H {H.matrix.shape}")
    Hm, z, P = H.matrix, prior.z, prior.P
    r = a - ops.matmul(z, Hm.T)
    if prior.layout == "diagonal":
        if R.ndim != 2:
            raise ShapeError("diagonal layout needs vector observation noise")
        p_sel = ops.matmul(P, Hm.T)
        S = R + p_sel
        assert (S.value > 0).all(), "innovation covariance must be positive"
        k = p_sel / S
        z_post = z + ops.matmul(k * r, Hm)
        P_post = P - ops.matmul(k * p_sel, Hm)
        return LatentBelief(z_post, P_post, prior.t, "diagonal"), InnovationRecord(r, S, k, H, "diagonal")
    B, d = z.shape
    HP = ops.matmul(Hm, P)
    S = ops.matmul(HP, Hm.T) + _diag_cov(R)
    K = ops.transpose(ops.solve(S, HP))
    z_post = z + ops.reshape(ops.matmul(K, ops.reshape(r, (B, H.m, 1))), (B, d))
    P_post = P - ops.matmul(K, HP)
    P_post = 0.5 * (P_post + ops.transpose(P_post))
    return LatentBelief(z_post, P_post, prior.t, "full"), InnovationRecord(r, S, K, H, "full")


class FilterModel(Protocol):
    latent_dim: int
    layout: str

    def initial_state(self, batch: int): ...

    def transition(self, z: Tensor, state, rng, control) -> TransitionPacket: ...

    def predict_pose(self, z: Tensor) -> Tensor | None: ...


@dataclass
class StepRecord:
    t: int
    prior: LatentBelief | None
    posterior: LatentBelief
    innovation: InnovationRecord | None
    transition: TransitionPacket | None
    y_prior: Tensor | None
    y_posterior: Tensor | None


@dataclass
class FilterResult:
    steps: list[StepRecord] = field(default_factory=list)
    state: object = None

    @property
    def final(self) -> LatentBelief:
        return self.steps[-1].posterior

    def __len__(self) -> int:
        return len(self.steps)


def _present(p: ObservationPacket | None) -> bool:
    return p is not None and p.any_present


def filter_sequence(model: FilterModel, packets: Sequence[ObservationPacket | None], rng=None,
                    controls=None, emissions: Sequence[EmissionMatrix | None] | None = None,
                    state=None) -> FilterResult:
    """Run the filter over ``packets``; absent steps (``None`` or all blocks
    absent) are predict-only and carry no innovation record.

    ``controls[t]`` drives the transition into step t + 1.  Transition
    randomness for step t comes from ``rng.child(t)``.
    """
    if not packets:
        raise ValueError("filter_sequence needs at least one observation")
    if not _present(packets[0]):
        raise ValueError("the first step must carry an observation to initialise the belief")

    def H_at(t: int) -> EmissionMatrix:
        if emissions is not None and emissions[t] is not None:
            return emissions[t]
        return emission_for_packet(packets[t], model.latent_dim)

    H0 = H_at(0)
    belief = initial_belief(packets[0], H0, model.layout)
    post, innov = update(belief, packets[0], H0)
    state = model.initial_state(belief.batch) if state is None else state
    out = FilterResult([StepRecord(0, None, post, innov, None, None, model.predict_pose(post.z))])
    for t in range(1, len(packets)):
        control = None if controls is None else controls[t - 1]
        step_rng = None if rng is None else rng.child(t)
        pkt = model.transition(post.z, state, step_rng, control)
        state = pkt.state
        prior = predict(post, pkt)
        if _present(packets[t]):
            post, innov = update(prior, packets[t], H_at(t))
        else:
            post, innov = prior, None
        out.steps.append(StepRecord(t, prior, post, innov, pkt, model.predict_pose(prior.z), model.predict_pose(post.z)))
    out.state = state
    return out


def open_loop(model: FilterModel, belief: LatentBelief, M: int, state=None, rng=None, controls=None,
              start: int = 0) -> tuple[list[LatentBelief], list[TransitionPacket], object]:
    """M predict-only steps from ``belief``; returns priors, transitions and the final LSTM state.

    Randomness for rollout step k comes from ``rng.child(start + k)``.
    """
    if M < 1:
        raise ValueError("open-loop horizon M must be at least 1")
    state = model.initial_state(belief.batch) if state is None else state
    priors, packets = [], []
    for k in range(M):
        control = None if controls is None else controls[k]
        pkt = model.transition(belief.z, state, None if rng is None else rng.child(start + k), control)
        state = pkt.state
        belief = predict(belief, pkt)
        priors.append(belief)
        packets.append(pkt)
    return priors, packets, state


def predict_output(predictor, belief: LatentBelief) -> Tensor:
    """Pose (B, 6) from a belief mean; ``predictor`` is any callable on (B, d)."""
    return predictor(belief.z)


def sequence_loss(targets, posterior_outputs: Sequence[Tensor], prior_outputs: Sequence[Tensor | None]) -> Tensor:
    """(1/T) sum_t mean_batch(|y_t - y~_t|^2 + |y_t - y^_t|^2).

    ``targets`` is (B, T, k) or (T, k); prior entries that are ``None``
    (the first step, which has no predict) contribute nothing.
    """
    y = np.asarray(targets.value if isinstance(targets, Tensor) else targets, dtype=float)
    if y.ndim == 2:
        y = y[None]
    T = y.shape[1]
    if len(posterior_outputs) != T or len(prior_outputs) != T:
        raise ShapeError(f"sequence_loss: {T} targets, {len(posterior_outputs)} posterior and {len(prior_outputs)} prior outputs")
    B = y.shape[0]
    total = None
    for t in range(T):
        for out in (posterior_outputs[t], prior_outputs[t]):
            if out is None:
                continue
            o = out if out.ndim == 2 else ops.reshape(out, (1, -1))
            term = ops.sum(ops.square(o - y[:, t]))
            total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * (1.0 / (T * B))


def trace_records(result: FilterResult, batch_index: int = 0) -> list[dict]:
    """Per-step JSON-ready dicts: t, z, diagP, r, S, K_frobenius, y_prior, y_posterior."""
    b = batch_index
    records = []
    for s in result.steps:
        inn = s.innovation
        S = None
        if inn is not None:
            S = inn.S.value[b].tolist()
        records.append({
            "t": s.t,
            "z": s.posterior.z.value[b].tolist(),
            "diagP": s.posterior.diag_P()[b].tolist(),
            "r": None if inn is None else inn.r.value[b].tolist(),
            "S": S,
            "K_frobenius": None if inn is None else float(inn.k_frobenius[b]),
            "y_prior": None if s.y_prior is None else s.y_prior.value[b].tolist(),
            "y_posterior": None if s.y_posterior is None else s.y_posterior.value[b].tolist(),
        })
    return records


def write_trace(path, result: FilterResult, batch_index: int = 0) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in trace_records(result, batch_index)]
    Path(path).write_text("".join(line + "\n" for line in lines))


@dataclass
class LinearGaussianModel:
    """Fixed A, Q (and no learned parts); observations come as packets."""

    A: np.ndarray
    Q: np.ndarray
    layout: str = "full"
    pose: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        if self.layout == "diagonal" and self.A.ndim != 1:
            raise ShapeError("diagonal layout needs a vector A")
        if self.layout == "full" and (self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]):
            raise ShapeError("full layout needs a square A")

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    def initial_state(self, batch: int):
        return batch

    def transition(self, z: Tensor, state, rng, control) -> TransitionPacket:
        B = z.shape[0]
        A = Tensor(np.broadcast_to(self.A, (B, *self.A.shape)).copy())
        Q = Tensor(np.broadcast_to(self.Q, (B, *self.Q.shape)).copy())
        return TransitionPacket(A, Q, "deterministic", None, state, self.layout)

    def predict_pose(self, z: Tensor) -> Tensor | None:
        if self.pose is None:
            return None
        return ops.matmul(z, self.pose)


def fixed_packets(observations, R, absent: Sequence[int] = ()) -> list[ObservationPacket | None]:
    """Wrap (T, m) or (B, T, m) observations with a fixed R (vector or matrix) as packets."""
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 2:
        obs = obs[None]
    B, T, m = obs.shape
    R = np.asarray(R, dtype=float)
    Rb = Tensor(np.broadcast_to(R, (B, *R.shape)).copy())
    skip = set(absent)
    return [None if t in skip else ObservationPacket(Tensor(obs[:, t]), Rb, (True,), (m,)) for t in range(T)]
