"""Synthetic systems with high-dimensional raw observations.

Three worlds are provided: a linear Gaussian state-space model, a damped
pendulum with a control torque, and a planar unicycle whose per-step
relative poses play the role of odometry targets.  Raw observations are a
fixed random nonlinear lift of the observable state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffmath import RngStream
from .nnkit.checkpoint import decode, encode, write_atomic

KINDS = ("linear", "pendulum", "planar")
EPISODE_MAGIC = b"DKFEPIS\x00"
EPISODE_VERSION = 1
POSE_DIM = 6
PROJECTION_GAIN = 0.8


@dataclass
class SystemSpec:
    """Generator settings.  Fields not used by ``kind`` are ignored.

    ``modalities`` gives the raw width of each sensor block; each block has
    its own random projection derived from ``projection_seed``.
    """

    kind: str = "planar"
    modalities: tuple[int, ...] = (64,)
    projection_seed: int = 1234
    obs_noise: float = 0.01
    dt: float | None = None
    # linear
    latent_dim: int = 4
    A: list | None = None
    Q: list | None = None
    x0: list | None = None
    stable: bool = True
    # pendulum
    g_over_l: float = 9.81
    damping: float = 0.1
    control: str = "sine"
    control_scale: float = 1.0
    theta0: float | None = None
    omega0: float = 0.0
    # planar
    speed_mean: float = 8.0
    speed_std: float = 2.0
    speed_corr: float = 0.95
    yaw_mean: float = 0.0
    yaw_std: float = 0.15
    yaw_corr: float = 0.9

    def __post_init__(self):
        self.modalities = tuple(int(m) for m in self.modalities)
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}; expected one of {KINDS}")
        if self.dt is None:
            self.dt = {"planar": 0.1, "pendulum": 0.01, "linear": 1.0}[self.kind]
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.obs_noise < 0:
            raise ValueError("obs_noise must be non-negative")
        if self.kind == "pendulum" and self.dt > 0.1:
            raise ValueError(f"pendulum dt={self.dt} exceeds 0.1; semi-implicit Euler would be unreliable")
        if self.kind == "linear":
            A = self.transition_matrix()
            radius = float(np.abs(np.linalg.eigvals(A)).max())
            if (radius < 1.0) != bool(self.stable):
                raise ValueError(f"declared stable={self.stable} but spectral radius of A is {radius:.4f}")
        if min(self.modalities) < self.observed_dim:
            raise ValueError(f"raw width {min(self.modalities)} is below observed state dim {self.observed_dim}")

    @property
    def observed_dim(self) -> int:
        return {"linear": self.latent_dim, "pendulum": 2, "planar": 2}[self.kind]

    @property
    def state_dim(self) -> int:
        return {"linear": self.latent_dim, "pendulum": 3, "planar": 2}[self.kind]

    @property
    def obs_dim(self) -> int:
        return sum(self.modalities)

    def transition_matrix(self) -> np.ndarray:
        n = self.latent_dim
        return np.eye(n) * 0.9 if self.A is None else np.asarray(self.A, dtype=float).reshape(n, n)

    def noise_covariance(self) -> np.ndarray:
        n = self.latent_dim
        if self.Q is None:
            return np.eye(n) * 0.01
        Q = np.asarray(self.Q, dtype=float)
        return np.diag(Q) if Q.ndim == 1 else Q.reshape(n, n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown system keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Episode:
    """Per-step arrays sharing length T.

    ``poses`` are per-step relative transforms (x, y, z, roll, pitch, yaw).
    ``abs_path`` (T + 1, 6) is the generator's own integration of them,
    starting at the origin (planar worlds only).
    """

    kind: str
    states: np.ndarray
    observations: np.ndarray
    poses: np.ndarray
    controls: np.ndarray | None = None
    corruption: np.ndarray | None = None
    abs_path: np.ndarray | None = None

    def __post_init__(self):
        T = len(self.states)
        for name in ("observations", "poses", "controls", "corruption"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != T:
                raise ValueError(f"episode field {name} has length {len(arr)}, states have {T}")
        if self.poses.shape[1:] != (POSE_DIM,):
            raise ValueError(f"poses must be (T, 6), got {self.poses.shape}")
        if self.abs_path is not None and len(self.abs_path) != T + 1:
            raise ValueError("abs_path must hold T + 1 poses")

    def __len__(self) -> int:
        return len(self.states)

    def replace(self, **kw) -> "Episode":
        return replace(self, **kw)


# --- raw observation lift ---------------------------------------------------


@dataclass
class Projection:
    w1: np.ndarray
    w2: np.ndarray
    center: np.ndarray
    scale: np.ndarray


_STATE_NORMS = {
    "planar": lambda s: (np.array([s.speed_mean, s.yaw_mean]), np.array([max(s.speed_std, 1e-3), max(s.yaw_std, 1e-3)])),
    "pendulum": lambda s: (np.zeros(2), np.array([1.0, 3.0])),
    "linear": lambda s: (np.zeros(s.latent_dim), np.ones(s.latent_dim)),
}


def make_projection(spec: SystemSpec, block: int = 0) -> Projection:
    """Random lift for one sensor block.

    Rows of the first layer come in (+v, -v) pairs so relu keeps the linear
    part recoverable; the second layer mixes into the raw width.
    """
    rng = RngStream(spec.projection_seed, (block,))
    n, D = spec.observed_dim, spec.modalities[block]
    half = max(n, D // 2)
    v = rng.child(0).normal((half, n)) / np.sqrt(n)
    w1 = np.concatenate([v, -v], axis=0)
    # gain below one keeps tanh mostly out of saturation for unit-scale states
    w2 = PROJECTION_GAIN * rng.child(1).normal((D, 2 * half)) / np.sqrt(2 * half)
    center, scale = _STATE_NORMS[spec.kind](spec)
    return Projection(w1, w2, center, scale)


def synthesize_raw_obs(state: np.ndarray, projection: Projection, rng=None, sigma: float = 0.0) -> np.ndarray:
    """obs = tanh(W2 relu(W1 (state - center)/scale)) + N(0, sigma^2); state is (n,) or (T, n)."""
    s = (np.asarray(state, dtype=float) - projection.center) / projection.scale
    hidden = np.maximum(s @ projection.w1.T, 0.0)
    obs = np.tanh(hidden @ projection.w2.T)
    if sigma > 0:
        if rng is None:
            raise ValueError("observation noise needs a random stream")
        obs = obs + sigma * rng.normal(obs.shape)
    return obs


def _observe(spec: SystemSpec, observed: np.ndarray, rng: RngStream) -> np.ndarray:
    blocks = [
        synthesize_raw_obs(observed, make_projection(spec, i), rng.child(100 + i), spec.obs_noise)
        for i in range(len(spec.modalities))
    ]
    return np.concatenate(blocks, axis=1)


def _pad_pose(x: np.ndarray) -> np.ndarray:
    out = np.zeros((len(x), POSE_DIM))
    k = min(POSE_DIM, x.shape[1])
    out[:, :k] = x[:, :k]
    return out


# --- generators -------------------------------------------------------------


def gen_linear(spec: SystemSpec, T: int, rng: RngStream) -> Episode:
    """x_{t+1} = A x_t + N(0, Q); targets are the leading six state coordinates."""
    if spec.kind != "linear":
        raise ValueError("gen_linear needs a linear spec")
    if not spec.stable and T > 500:
        raise ValueError(f"unstable system with T={T} > 500 would overflow")
    A, Q = spec.transition_matrix(), spec.noise_covariance()
    n = spec.latent_dim
    L = np.linalg.cholesky(Q) if np.any(Q) else np.zeros((n, n))
    x = np.zeros((T, n))
    x[0] = rng.child(0).normal(n) if spec.x0 is None else np.asarray(spec.x0, dtype=float)
    eps = rng.child(1).normal((T, n))
    for t in range(1, T):
        x[t] = A @ x[t - 1] + L @ eps[t]
    return Episode("linear", x, _observe(spec, x, rng), _pad_pose(x))


def pendulum_control(spec: SystemSpec, T: int, rng: RngStream) -> np.ndarray:
    if spec.control == "none":
        return np.zeros(T)
    if spec.control == "sine":
        freq = 0.5 + rng.uniform(())
        phase = 2 * np.pi * rng.uniform(())
        return spec.control_scale * np.sin(2 * np.pi * freq * spec.dt * np.arange(T) + phase)
    if spec.control == "random":
        # piecewise-constant torque held for 20 steps
        levels = spec.control_scale * (2 * rng.uniform(T // 20 + 1) - 1)
        return np.repeat(levels, 20)[:T]
    raise ValueError(f"unknown control policy {spec.control!r}")


def gen_pendulum(spec: SystemSpec, T: int, rng: RngStream, control: np.ndarray | None = None) -> Episode:
    """Semi-implicit Euler on theta'' = -(g/l) sin(theta) - damping * omega + u.

    State rows are (theta, omega, u); u_t drives the step from t to t + 1.
    """
    if spec.kind != "pendulum":
        raise ValueError("gen_pendulum needs a pendulum spec")
    u = pendulum_control(spec, T, rng.child(0)) if control is None else np.asarray(control, dtype=float)
    if len(u) != T:
        raise ValueError(f"control has length {len(u)}, expected {T}")
    theta0 = (rng.child(1).uniform(()) * 2 - 1) * np.pi / 2 if spec.theta0 is None else spec.theta0
    th, om = np.zeros(T), np.zeros(T)
    th[0], om[0] = theta0, spec.omega0
    dt = spec.dt
    for t in range(1, T):
        om[t] = om[t - 1] + dt * (-spec.g_over_l * np.sin(th[t - 1]) - spec.damping * om[t - 1] + u[t - 1])
        th[t] = th[t - 1] + dt * om[t]
    states = np.stack([th, om, u], axis=1)
    return Episode("pendulum", states, _observe(spec, states[:, :2], rng), _pad_pose(states[:, :2]),
                   controls=u[:, None].copy())


def planar_relative_pose(v: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Exact body-frame motion over dt at constant speed and yaw rate."""
    v, omega = np.asarray(v, dtype=float), np.asarray(omega, dtype=float)
    th = omega * dt
    straight = np.abs(omega) < 1e-9
    safe = np.where(straight, 1.0, omega)
    dx = np.where(straight, v * dt, v / safe * np.sin(th))
    dy = np.where(straight, 0.0, v / safe * (1.0 - np.cos(th)))
    out = np.zeros(v.shape + (POSE_DIM,))
    out[..., 0], out[..., 1], out[..., 5] = dx, dy, th
    return out


def _ou(mean: float, std: float, corr: float, T: int, rng: RngStream) -> np.ndarray:
    eps = rng.normal(T)
    x = np.empty(T)
    x[0] = mean + std * eps[0]
    k = std * np.sqrt(max(0.0, 1.0 - corr * corr))
    for t in range(1, T):
        x[t] = mean + corr * (x[t - 1] - mean) + k * eps[t]
    return x


def gen_planar_odometry(spec: SystemSpec, T: int, rng: RngStream) -> Episode:
    """Unicycle with Ornstein-Uhlenbeck speed and yaw rate; targets are relative poses."""
    if spec.kind != "planar":
        raise ValueError("gen_planar_odometry needs a planar spec")
    v = np.maximum(_ou(spec.speed_mean, spec.speed_std, spec.speed_corr, T, rng.child(0)), 0.0)
    w = _ou(spec.yaw_mean, spec.yaw_std, spec.yaw_corr, T, rng.child(1))
    states = np.stack([v, w], axis=1)
    rel = planar_relative_pose(v, w, spec.dt)
    path = np.zeros((T + 1, POSE_DIM))
    for t in range(T):
        x, y, yaw = path[t, 0], path[t, 1], path[t, 5]
        c, s = np.cos(yaw), np.sin(yaw)
        path[t + 1, 0] = x + c * rel[t, 0] - s * rel[t, 1]
        path[t + 1, 1] = y + s * rel[t, 0] + c * rel[t, 1]
        path[t + 1, 5] = yaw + rel[t, 5]
    return Episode("planar", states, _observe(spec, states, rng), rel, abs_path=path)


def generate(spec: SystemSpec, T: int, rng: RngStream) -> Episode:
    if spec.kind == "linear":
        return gen_linear(spec, T, rng)
    if spec.kind == "pendulum":
        return gen_pendulum(spec, T, rng)
    return gen_planar_odometry(spec, T, rng)


def generate_dataset(spec: SystemSpec, n: int, T: int, seed: int) -> list[Episode]:
    root = RngStream(seed)
    return [generate(spec, T, root.child(i)) for i in range(n)]


# --- corruption -------------------------------------------------------------


STAIRCASE_LEVELS = (0.0, 0.3, 0.5, 0.75, 0.8125, 1.0)
STAIRCASE_RANGES = ((1, 5), (6, 7), (8, 9), (10, 11), (12, 13), (14, 15))


@dataclass
class CorruptionSpec:
    """``schedule`` holds (first_step, last_step, level) with 1-based inclusive steps."""

    schedule: list[tuple[int, int, float]] = field(default_factory=list)
    mode: str = "blank"

    def __post_init__(self):
        self.schedule = [(int(a), int(b), float(lv)) for a, b, lv in self.schedule]
        if self.mode != "blank":
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        if not self.schedule:
            raise ValueError("corruption schedule is empty")
        expect = 1
        prev = -np.inf
        for a, b, lv in self.schedule:
            if a != expect or b < a:
                raise ValueError(f"schedule range ({a}, {b}) leaves a gap or overlaps; expected start {expect}")
            if not 0.0 <= lv <= 1.0:
                raise ValueError(f"corruption level {lv} outside [0, 1]")
            if lv < prev:
                raise ValueError("corruption levels must be non-decreasing")
            expect, prev = b + 1, lv

    @property
    def length(self) -> int:
        return self.schedule[-1][1]

    def levels(self) -> np.ndarray:
        out = np.zeros(self.length)
        for a, b, lv in self.schedule:
            out[a - 1 : b] = lv
        return out

    @classmethod
    def staircase(cls) -> "CorruptionSpec":
        """Six stages over 15 steps: blank fraction = block width / 640 image columns."""
        return cls([(a, b, lv) for (a, b), lv in zip(STAIRCASE_RANGES, STAIRCASE_LEVELS)])

    @classmethod
    def constant(cls, T: int, level: float = 0.0) -> "CorruptionSpec":
        return cls([(1, T, level)])


def blank_count(level: float, D: int) -> int:
    return int(np.floor(level * D + 0.5))


def corrupt(episode: Episode, spec: CorruptionSpec, rng: RngStream) -> Episode:
    """Zero a contiguous (mod D) run of round(level * D) raw coordinates per step."""
    T = len(episode)
    if spec.length != T:
        raise ValueError(f"schedule covers {spec.length} steps, episode has {T}")
    levels = spec.levels()
    obs = episode.observations.copy()
    D = obs.shape[1]
    offsets = rng.integers(0, D, size=T)
    for t in range(T):
        k = blank_count(levels[t], D)
        if k:
            obs[t, (offsets[t] + np.arange(k)) % D] = 0.0
    return episode.replace(observations=obs, corruption=levels)


# --- serialisation ----------------------------------------------------------


def _row(arr, t):
    return None if arr is None else arr[t].tolist()


def episode_to_jsonl(ep: Episode) -> str:
    """One JSON object per step; abs_pose is the pose after the step."""
    lines = []
    for t in range(len(ep)):
        rec = {
            "t": t,
            "kind": ep.kind,
            "state": ep.states[t].tolist(),
            "obs": ep.observations[t].tolist(),
            "pose": ep.poses[t].tolist(),
            "control": _row(ep.controls, t),
            "corruption": None if ep.corruption is None else float(ep.corruption[t]),
            "abs_pose": None if ep.abs_path is None else ep.abs_path[t + 1].tolist(),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def episode_from_jsonl(text: str) -> Episode:
    recs = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not recs:
        raise ValueError("empty episode file")
    if [r["t"] for r in recs] != list(range(len(recs))):
        raise ValueError("episode steps are out of order or missing")

    def stack(key):
        if recs[0][key] is None:
            return None
        return np.array([r[key] for r in recs], dtype=float)

    abs_path = stack("abs_pose")
    if abs_path is not None:
        abs_path = np.vstack([np.zeros((1, POSE_DIM)), abs_path])
    return Episode(recs[0]["kind"], stack("state"), stack("obs"), stack("pose"), stack("control"),
                   stack("corruption"), abs_path)


def episode_to_bytes(ep: Episode) -> bytes:
    tensors = {"states": ep.states, "observations": ep.observations, "poses": ep.poses}
    for name in ("controls", "corruption", "abs_path"):
        if getattr(ep, name) is not None:
            tensors[name] = getattr(ep, name)
    return encode(tensors, {"kind": ep.kind}, 0, magic=EPISODE_MAGIC, version=EPISODE_VERSION)


def episode_from_bytes(buf: bytes) -> Episode:
    ck = decode(buf, magic=EPISODE_MAGIC, version=EPISODE_VERSION)
    t = ck.tensors
    return Episode(ck.config["kind"], t["states"], t["observations"], t["poses"], t.get("controls"),
                   t.get("corruption"), t.get("abs_path"))


def save_episode(ep: Episode, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    j, b = stem.with_suffix(".jsonl"), stem.with_suffix(".bin")
    write_atomic(j, episode_to_jsonl(ep).encode("utf-8"))
    write_atomic(b, episode_to_bytes(ep))
    return j, b


def load_episode(path) -> Episode:
    path = Path(path)
    if path.suffix == ".bin":
        return episode_from_bytes(path.read_bytes())
    return episode_from_jsonl(path.read_text())


def load_dataset(paths: Sequence) -> list[Episode]:
    return [load_episode(p) for p in paths]
