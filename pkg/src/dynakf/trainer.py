"""Windowed training of the neural Kalman model and of the LSTM baseline."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffmath import NoiseRecorder, NonFiniteError, RngStream, Tape, Tensor, grad_check, no_tape, ops
from .emission import EncoderParams, encode
from .kalman import sequence_loss
from .model import DynaNet, ModelConfig, PosePredictor, split_modalities
from .nnkit import AdamState, LstmCellParams, LstmState, NonFiniteGradientError, adam_step, load_checkpoint, lstm_step, save_checkpoint
from .simlab import Episode

HISTORY_COLUMNS = ("epoch", "loss", "val_rmse", "grad_norm", "seconds")


@dataclass
class TrainConfig:
    window: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    grad_trace: list[float] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def rows(self, timing: bool = False) -> list[tuple]:
        """CSV rows; wall-clock is left blank unless ``timing`` so reruns are byte-identical."""
        return [(e, l, v, g, s if timing else "") for e, l, v, g, s in
                zip(self.epochs, self.loss, self.val_rmse, self.grad_norm, self.seconds)]


class TrainingAborted(FloatingPointError):
    def __init__(self, epoch: int, batch: int, reason: str, checkpoint: str | None):
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {reason}"
                         + (f" (state dumped to {checkpoint})" if checkpoint else ""))
        self.epoch, self.batch, self.checkpoint = epoch, batch, checkpoint


# --- data -------------------------------------------------------------------


def make_windows(episode: Episode, window: int, stride: int = 1) -> list[Episode]:
    """Sliding sub-episodes (views into the episode arrays)."""
    T = len(episode)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if T < window:
        raise ValueError(f"episode has {T} steps, shorter than window {window}")

    def cut(a, k):
        return None if a is None else a[k : k + window]

    return [
        Episode(episode.kind, cut(episode.states, k), cut(episode.observations, k), cut(episode.poses, k),
                cut(episode.controls, k), cut(episode.corruption, k))
        for k in range(0, T - window + 1, stride)
    ]


def split_episodes(episodes: Sequence[Episode], val_fraction: float, seed: int) -> tuple[list[Episode], list[Episode]]:
    """Partition whole episodes so no validation window overlaps a training one."""
    n = len(episodes)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    if val_fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    order = RngStream(seed, (7,)).permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [episodes[i] for i in train], [episodes[i] for i in val]


def stack(episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    x = np.stack([e.observations for e in episodes])
    y = np.stack([e.poses for e in episodes])
    c = None if episodes[0].controls is None else np.stack([e.controls for e in episodes])
    return x, y, c


# --- LSTM baseline ----------------------------------------------------------


@dataclass
class BaselineConfig:
    hidden: int = 16
    modalities: tuple[tuple[int, int], ...] = ((64, 16),)
    encoder_hidden: tuple[int, ...] = (64,)
    layers: int = 2
    control_dim: int = 0

    def __post_init__(self):
        self.modalities = tuple((int(r), int(f)) for r, f in self.modalities)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("baseline needs at least one layer and a positive hidden size")

    @classmethod
    def matching(cls, model: ModelConfig, layers: int = 2) -> "BaselineConfig":
        """Same encoder and predictor, LSTM hidden equal to the latent dim."""
        return cls(model.latent_dim, model.modalities, model.encoder_hidden, layers, model.control_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [list(m) for m in self.modalities]
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        return cls(**d)

    @property
    def raw_dim(self) -> int:
        return sum(r for r, _ in self.modalities)


class LstmBaseline:
    """Encoder features -> stacked LSTM -> pose predictor; no filter."""

    def __init__(self, config: BaselineConfig, encoders: list[EncoderParams], cells: list[LstmCellParams],
                 predictor: PosePredictor):
        self.config = config
        self.encoders = encoders
        self.cells = cells
        self.predictor = predictor

    @classmethod
    def init(cls, config: BaselineConfig, rng) -> "LstmBaseline":
        encoders = [EncoderParams.init(raw, feat, rng.child(0, i), config.encoder_hidden)
                    for i, (raw, feat) in enumerate(config.modalities)]
        width = sum(f for _, f in config.modalities) + config.control_dim
        cells = []
        for k in range(config.layers):
            cells.append(LstmCellParams.init(width if k == 0 else config.hidden, config.hidden, rng.child(1, k)))
        return cls(config, encoders, cells, PosePredictor.init(config.hidden, rng.child(2)))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, enc in enumerate(self.encoders):
            # the noise head has no role without a filter
            out.update({k: v for k, v in enc.parameters(f"encoder{i}.").items() if ".noise." not in k})
        for k, cell in enumerate(self.cells):
            out.update(cell.parameters(f"lstm{k}."))
        out.update(self.predictor.parameters("predictor."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, arrays) -> None:
        for k, p in self.parameters().items():
            v = np.asarray(arrays[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {v.shape}, model shape {p.shape}")
            p.value = v.copy()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def initial_state(self, batch: int) -> list[LstmState]:
        return [LstmState.zeros(self.config.hidden, batch) for _ in self.cells]

    def features(self, x: np.ndarray) -> Tensor:
        blocks = split_modalities(x, self.config)
        return ops.concat([encode(enc, xb).features for enc, xb in zip(self.encoders, blocks)], axis=1)

    def step(self, feats: Tensor, state: list[LstmState], control=None) -> tuple[Tensor, list[LstmState]]:
        h = feats if control is None else ops.concat([feats, Tensor(np.asarray(control, dtype=float))], axis=1)
        new = []
        for cell, s in zip(self.cells, state):
            h, s2 = lstm_step(cell, h, s)
            new.append(s2)
        return self.predictor(h), new

    def run(self, x, controls=None, state=None) -> tuple[list[Tensor], list[LstmState]]:
        x = np.asarray(x, dtype=float)
        x = x[None] if x.ndim == 2 else x
        B, T, _ = x.shape
        state = self.initial_state(B) if state is None else state
        outs = []
        for t in range(T):
            c = None if controls is None else np.asarray(controls)[:, t]
            y, state = self.step(self.features(x[:, t]), state, c)
            outs.append(y)
        return outs, state

    def loss(self, x, y, rng=None, controls=None) -> Tensor:
        outs, _ = self.run(x, controls)
        return sequence_loss(y, outs, [None] * len(outs))

    def posterior_poses(self, x, rng=None, controls=None) -> np.ndarray:
        with no_tape():
            outs, _ = self.run(x, controls)
        return np.stack([o.value for o in outs], axis=1)


@dataclass
class BaselineForecaster:
    """Open loop: after the last real observation the LSTM is fed the encoding of a zero observation."""

    model: LstmBaseline

    def forecast(self, episode: Episode, init: int, horizon: int) -> np.ndarray:
        x = episode.observations[None]
        ctrl = None if episode.controls is None else episode.controls[None]
        with no_tape():
            _, state = self.model.run(x[:, :init], None if ctrl is None else ctrl[:, :init])
            blank = self.model.features(np.zeros((1, x.shape[2])))
            out = []
            for k in range(horizon):
                c = None if ctrl is None else ctrl[:, init + k]
                y, state = self.model.step(blank, state, c)
                out.append(y.value[0])
        return np.stack(out)


# --- training loop ----------------------------------------------------------


def pose_rmse(model, episodes: Sequence[Episode], seed: int = 0, present=None, steps: slice = slice(None)) -> float:
    """sqrt(mean over ``steps`` and episodes of |posterior pose - true pose|^2).

    ``present`` is an optional (T, n_modalities) mask passed to the filter.
    """
    if not episodes:
        return float("nan")
    x, y, c = stack(episodes)
    rng = RngStream(seed, (3,))
    pred = model.posterior_poses(x, rng, c) if present is None else model.posterior_poses(x, rng, c, present)
    return float(np.sqrt(np.mean(np.sum((pred[:, steps] - y[:, steps]) ** 2, axis=-1))))


def _flat_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def save_training_state(path, model, adam: AdamState, epoch: int, extra: dict | None = None) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k in adam.m:
        tensors[f"adam.m/{k}"] = adam.m[k]
        tensors[f"adam.v/{k}"] = adam.v[k]
    config = {"model": model.config.to_dict(), "kind": type(model).__name__, "epoch": epoch,
              "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}}
    config.update(extra or {})
    save_checkpoint(path, tensors, config, adam.step)


def load_training_state(path, model) -> tuple[AdamState, int, dict]:
    """Restore parameters into ``model``; returns the optimiser, the epochs completed and the config."""
    ck = load_checkpoint(path)
    model.load_state_dict({k[6:]: v for k, v in ck.tensors.items() if k.startswith("model/")})
    a = ck.config.get("adam", {})
    adam = AdamState(lr=a.get("lr", 1e-4), beta1=a.get("beta1", 0.9), beta2=a.get("beta2", 0.999),
                     eps=a.get("eps", 1e-8), step=ck.step,
                     m={k[7:]: v for k, v in ck.tensors.items() if k.startswith("adam.m/")},
                     v={k[7:]: v for k, v in ck.tensors.items() if k.startswith("adam.v/")})
    return adam, int(ck.config.get("epoch", 0)), ck.config


def train(model, windows: Sequence[Episode], config: TrainConfig, val_episodes: Sequence[Episode] = (),
          checkpoint_dir=None, adam: AdamState | None = None, start_epoch: int = 0, extra: dict | None = None):
    """Adam on the windowed sequence loss; works for DynaNet and LstmBaseline alike.

    Batch order for epoch e comes from ``RngStream(seed).child(0, e)`` and
    transition noise for batch b from ``RngStream(seed).child(1, e, b)``, so
    a resumed run replays exactly what an uninterrupted one would.
    """
    if not windows and config.epochs > start_epoch:
        raise ValueError("training set is empty")
    lens = {len(w) for w in windows}
    if len(lens) > 1:
        raise ValueError(f"windows have mixed lengths {sorted(lens)}")
    root = RngStream(config.seed)
    adam = AdamState(lr=config.lr) if adam is None else adam
    params = model.parameters()
    hist = TrainHistory()
    ckdir = None if checkpoint_dir is None else Path(checkpoint_dir)
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    n = len(windows)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = root.child(0, epoch).permutation(n)
        losses, weights, norms = [], [], []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            x, y, c = stack([windows[i] for i in idx])
            reason, grads = None, None
            try:
                with Tape() as tape:
                    loss = model.loss(x, y, root.child(1, epoch, b), c)
                value = float(loss.value)
                if not math.isfinite(value):
                    reason = f"non-finite loss {value}"
            except NonFiniteError as err:
                reason = str(err)
            if reason is None:
                g = tape.backward(loss)
                grads = {k: g[p] for k, p in params.items()}
                try:
                    adam_step(adam, params, grads)
                except NonFiniteGradientError as err:
                    reason = str(err)
            if reason is not None:
                dump = None
                if ckdir is not None:
                    dump = str(ckdir / "aborted.ckpt")
                    save_training_state(dump, model, adam, epoch, {"aborted_batch": b, **(extra or {})})
                raise TrainingAborted(epoch, b, reason, dump)
            norm = _flat_norm(grads)
            hist.grad_trace.append(norm)
            losses.append(value * len(idx))
            weights.append(len(idx))
            norms.append(norm)
        hist.epochs.append(epoch + 1)
        hist.loss.append(math.fsum(losses) / sum(weights))
        hist.grad_norm.append(math.fsum(norms) / len(norms))
        hist.val_rmse.append(pose_rmse(model, val_episodes, config.seed) if val_episodes else float("nan"))
        hist.seconds.append(time.perf_counter() - t0)
        if ckdir is not None:
            path = ckdir / f"epoch_{epoch + 1:03d}.ckpt"
            save_training_state(path, model, adam, epoch + 1, extra)
            hist.checkpoints.append(str(path))
    return model, hist


def train_baseline(baseline: LstmBaseline, windows, config: TrainConfig, val_episodes=(), checkpoint_dir=None, **kw):
    return train(baseline, windows, config, val_episodes, checkpoint_dir, **kw)


# --- whole-pipeline gradient check ---------------------------------------------


@dataclass
class GroupReport:
    group: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    passed: bool
    skipped: int = 0
    checked: int = 0


@dataclass
class ModelGradReport:
    tolerance: float
    groups: list[GroupReport]

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def failing(self) -> list[GroupReport]:
        return [g for g in self.groups if not g.passed]

    def summary(self) -> str:
        lines = [f"model_grad_check tol={self.tolerance:g}"]
        for g in self.groups:
            lines.append(f"  {'ok  ' if g.passed else 'FAIL'} {g.group:<22s} max_rel={g.max_rel_error:.3e} "
                         f"({g.worst_param} at {g.worst_index}; {g.skipped}/{g.checked} at kinks)")
        return "\n".join(lines)


def parameter_group(name: str) -> str:
    head, _, rest = name.partition(".")
    if head == "transition":
        return "transition." + rest.partition(".")[0]
    return head


def model_grad_check(model: DynaNet, window: Episode, seed: int = 0, tolerance: float | None = None,
                     eps: float = 1e-2, method: str = "ridders") -> ModelGradReport:
    """Finite-difference check of every parameter group through the full pipeline.

    Dirichlet randomness is recorded once and replayed as frozen base noise
    so each perturbed forward pass sees the same draws.  Pipeline gradients
    span 1e-9 (drowned by roundoff in a fixed small step) to entries acting
    on 1e-3-scale noise terms (badly truncated by a fixed wide step), so the
    numeric side uses Ridders' extrapolation.  Entries where every step
    flips some relu are skipped and counted.
    """
    cfg = model.config
    if cfg.latent_dim > 4 or cfg.raw_dim > 8 or len(window) > 3:
        raise ValueError("model_grad_check is for tiny models only (d <= 4, D <= 8, window <= 3)")
    stochastic = cfg.transition_mode == "dirichlet" or cfg.alpha_jitter or cfg.feature_jitter
    if tolerance is None:
        tolerance = 1e-3 if stochastic else 1e-4
    x, y, c = stack([window])
    noise = None
    if stochastic:
        rec = NoiseRecorder(RngStream(seed, (5,)))
        with no_tape():
            model.loss(x, y, rec, c)
        noise = rec.frozen()

    def fn():
        return model.loss(x, y, None if noise is None else noise.rewind(), c)

    report = grad_check(fn, model.parameters(), eps=eps, tolerance=tolerance, method=method, skip_kinks=True)
    groups: dict[str, GroupReport] = {}
    for p in report.params:
        g = parameter_group(p.name)
        cur = groups.get(g)
        if cur is None or p.max_rel_error > cur.max_rel_error:
            groups[g] = GroupReport(g, p.max_rel_error, p.name, p.worst_index, True,
                                    0 if cur is None else cur.skipped, 0 if cur is None else cur.checked)
        groups[g].skipped += p.skipped
        groups[g].checked += p.analytic.size
    for g in groups.values():
        g.passed = g.max_rel_error < tolerance
    return ModelGradReport(tolerance, list(groups.values()))
