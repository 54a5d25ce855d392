"""The full neural Kalman model: encoders, transition head, filter, pose predictor."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .diffmath import ShapeError, Tensor, no_tape, ops
from .emission import EncoderParams, ObservationPacket, encode, fuse
from .kalman import FilterResult, filter_sequence, sequence_loss
from .nnkit import Dense
from .transition import TransitionHead, TransitionPacket, generate_transition

POSE_DIM = 6


@dataclass
class ModelConfig:
    """``modalities`` lists (raw width, feature width) per sensor, in fusion order.

    Feature widths fill the leading latent coordinates; any remainder of
    ``latent_dim`` is never observed and is carried by the transition alone.
    """

    latent_dim: int = 16
    modalities: tuple[tuple[int, int], ...] = ((64, 16),)
    encoder_hidden: tuple[int, ...] = (64,)
    transition_mode: str = "dirichlet"
    layout: str = "diagonal"
    transition_hidden: int | None = None
    control_dim: int = 0
    alpha_jitter: bool = False
    feature_jitter: bool = False
    alpha_bias: float = 1.0

    def __post_init__(self):
        self.modalities = tuple((int(r), int(f)) for r, f in self.modalities)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        width = sum(f for _, f in self.modalities)
        if width > self.latent_dim:
            raise ValueError(f"feature widths total {width}, more than latent_dim {self.latent_dim}")
        if self.transition_mode not in ("dirichlet", "deterministic"):
            raise ValueError(f"unknown transition mode {self.transition_mode!r}")
        if self.layout not in ("diagonal", "full"):
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def raw_dim(self) -> int:
        return sum(r for r, _ in self.modalities)

    @property
    def feature_dim(self) -> int:
        return sum(f for _, f in self.modalities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [list(m) for m in self.modalities]
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PosePredictor:
    """Two linear heads (translation, Euler angles) concatenated to a 6-vector."""

    translation: Dense
    rotation: Dense

    @classmethod
    def init(cls, latent_dim: int, rng) -> "PosePredictor":
        return cls(Dense.init(latent_dim, 3, rng.child(0)), Dense.init(latent_dim, 3, rng.child(1)))

    @classmethod
    def zeros(cls, latent_dim: int) -> "PosePredictor":
        return cls(Dense.zeros(latent_dim, 3), Dense.zeros(latent_dim, 3))

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.translation.in_dim:
            raise ShapeError(f"predictor: input {z.shape} does not match latent dim {self.translation.in_dim}")
        return ops.concat([self.translation(z), self.rotation(z)], axis=1)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.translation.parameters(f"{prefix}translation."), **self.rotation.parameters(f"{prefix}rotation.")}


def split_modalities(x: np.ndarray, config: ModelConfig) -> list[np.ndarray]:
    """Split the last axis of raw observations into per-modality blocks."""
    if x.shape[-1] != config.raw_dim:
        raise ShapeError(f"raw observation width {x.shape[-1]} does not match model raw_dim {config.raw_dim}")
    edges = np.cumsum([0] + [r for r, _ in config.modalities])
    return [x[..., a:b] for a, b in zip(edges[:-1], edges[1:])]


class DynaNet:
    """Neural emission + learned transition + Kalman filter + pose predictor."""

    def __init__(self, config: ModelConfig, encoders: list[EncoderParams], head: TransitionHead,
                 predictor: PosePredictor):
        self.config = config
        self.encoders = encoders
        self.head = head
        self.predictor = predictor

    @classmethod
    def init(cls, config: ModelConfig, rng) -> "DynaNet":
        encoders = [
            EncoderParams.init(raw, feat, rng.child(0, i), config.encoder_hidden, config.feature_jitter)
            for i, (raw, feat) in enumerate(config.modalities)
        ]
        head = TransitionHead.init(config.latent_dim, rng.child(1), config.transition_mode, config.layout,
                                   config.transition_hidden, config.control_dim, config.alpha_jitter)
        if config.transition_mode == "dirichlet":
            head.a_head.bias.value = head.a_head.bias.value + config.alpha_bias
        return cls(config, encoders, head, PosePredictor.init(config.latent_dim, rng.child(2)))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "DynaNet":
        encoders = [EncoderParams.zeros(raw, feat, config.encoder_hidden) for raw, feat in config.modalities]
        head = TransitionHead.zeros(config.latent_dim, config.transition_mode, config.layout,
                                    config.transition_hidden, config.control_dim)
        return cls(config, encoders, head, PosePredictor.zeros(config.latent_dim))

    # -- protocol used by kalman.filter_sequence ---------------------------

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def layout(self) -> str:
        return self.config.layout

    def initial_state(self, batch: int):
        return self.head.initial_state(batch)

    def transition(self, z: Tensor, state, rng, control) -> TransitionPacket:
        return generate_transition(self.head, z, state, rng, control)

    def predict_pose(self, z: Tensor) -> Tensor:
        return self.predictor(z)

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, enc in enumerate(self.encoders):
            out.update(enc.parameters(f"encoder{i}."))
        out.update(self.head.parameters("transition."))
        out.update(self.predictor.parameters("predictor."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            v = np.asarray(arrays[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"parameter {k!r}: checkpoint shape {v.shape}, model shape {p.shape}")
            p.value = v.copy()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    # -- running -------------------------------------------------------------

    def observe(self, x, present: Sequence[bool] | None = None, rng=None) -> ObservationPacket:
        """Encode raw observations (B, raw_dim); ``present`` drops modalities."""
        x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=float)
        blocks = split_modalities(x, self.config)
        present = [True] * len(blocks) if present is None else list(present)
        if len(present) != len(blocks):
            raise ShapeError(f"present mask has {len(present)} entries for {len(blocks)} modalities")
        packets = []
        for i, (enc, xb, on) in enumerate(zip(self.encoders, blocks, present)):
            if on:
                packets.append(encode(enc, xb, None if rng is None else rng.child(i)))
            else:
                packets.append(ObservationPacket.absent(enc.out_dim))
        return fuse(packets)

    def run(self, x, rng=None, present=None, controls=None) -> FilterResult:
        """Filter a batch of sequences x (B, T, raw_dim).

        ``present`` is an optional (T, n_modalities) boolean mask; a step with
        no modality present is predict-only.  ``controls`` is (B, T, c).
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        B, T, _ = x.shape
        packets = []
        for t in range(T):
            mask = None if present is None else present[t]
            if mask is not None and not any(mask):
                packets.append(None)
                continue
            enc_rng = None if rng is None else rng.child(10_000 + t)
            packets.append(self.observe(x[:, t], mask, enc_rng if self.config.feature_jitter else None))
        ctrl = None
        if controls is not None:
            c = np.asarray(controls, dtype=float)
            c = c[None] if c.ndim == 2 else c
            ctrl = [c[:, t] for t in range(T)]
        elif self.config.control_dim:
            raise ValueError("model expects control inputs")
        return filter_sequence(self, packets, rng, ctrl)

    def loss(self, x, y, rng=None, controls=None) -> Tensor:
        res = self.run(x, rng, controls=controls)
        return sequence_loss(y, [s.y_posterior for s in res.steps], [s.y_prior for s in res.steps])

    def posterior_poses(self, x, rng=None, controls=None, present=None) -> np.ndarray:
        """Posterior pose predictions (B, T, 6) without recording a tape."""
        with no_tape():
            res = self.run(x, rng, present, controls)
        return np.stack([s.y_posterior.value for s in res.steps], axis=1)
