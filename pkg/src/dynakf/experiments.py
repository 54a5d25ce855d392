"""Desk-scale experiment drivers shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cli import ExperimentConfig, build_config, forecaster_for, probe_episodes, training_set
from .diffmath import RngStream, no_tape
from .evalkit import GainProbeReport, gain_probe, prediction_protocol
from .model import DynaNet
from .simlab import generate_dataset
from .trainer import BaselineConfig, LstmBaseline, TrainHistory, pose_rmse, train

KINDS = ("dirichlet", "deterministic", "lstm")

# mirrored by configs/desk.toml
DESK = {
    "seed": 0,
    "system": {"kind": "planar", "modalities": [32, 32]},
    "model": {"latent_dim": 16, "modalities": [[32, 8], [32, 8]], "encoder_hidden": [64],
              "transition_mode": "dirichlet", "layout": "diagonal"},
    "train": {"window": 5, "batch_size": 32, "lr": 1e-4, "epochs": 30},
    "data": {"episodes": 100, "length": 50},
    "corruption": "staircase",
}

TEST_EPISODES = 20
TEST_SEED_OFFSET = 20_000


def desk_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """The desk configuration; ``overrides`` take dotted keys, e.g. ``{"train.epochs": 2}``."""
    return build_config(DESK, {"seed": seed, **overrides}, env={})


@dataclass
class DeskRun:
    kind: str
    model: object
    history: TrainHistory
    val_episodes: list
    untrained_rmse: float
    final_rmse: float
    seconds: float
    extras: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.final_rmse / self.untrained_rmse


def init_model(cfg: ExperimentConfig, kind: str):
    """Fresh model of ``kind`` seeded as the CLI's train commands seed it."""
    rng = RngStream(cfg.seed, (1,))
    if kind == "lstm":
        return LstmBaseline.init(BaselineConfig.matching(cfg.model), rng)
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    mcfg = cfg.model.from_dict({**cfg.model.to_dict(), "transition_mode": kind})
    return DynaNet.init(mcfg, rng)


def desk_episodes(cfg: ExperimentConfig) -> list:
    return generate_dataset(cfg.system, cfg.data.episodes, cfg.data.length, cfg.seed)


def train_desk(cfg: ExperimentConfig, kind: str = "dirichlet", episodes=None) -> DeskRun:
    """Generate (or reuse) the desk data, train one model and score it on the validation split."""
    t0 = time.perf_counter()
    episodes = desk_episodes(cfg) if episodes is None else episodes
    windows, val = training_set(cfg, episodes)
    model = init_model(cfg, kind)
    before = pose_rmse(model, val, cfg.seed)
    model, hist = train(model, windows, cfg.train, val)
    after = pose_rmse(model, val, cfg.seed)
    return DeskRun(kind, model, hist, val, before, after, time.perf_counter() - t0)


def held_out_episodes(cfg: ExperimentConfig) -> list:
    """Held-out episodes for the prediction protocol, disjoint from training and probe seeds."""
    return generate_dataset(cfg.system, TEST_EPISODES, cfg.data.length, cfg.seed + TEST_SEED_OFFSET)


def ordering_trial(seed: int, horizon: int = 10, reuse: dict | None = None, **overrides) -> dict:
    """Train all three kinds on one seed's world; open-loop translation RMSE at ``horizon``.

    ``reuse`` maps kind to an already trained DeskRun on this same config.
    """
    cfg = desk_config(seed, **overrides)
    episodes = desk_episodes(cfg)
    held_out = held_out_episodes(cfg)
    out = {}
    for kind in KINDS:
        run = (reuse or {}).get(kind) or train_desk(cfg, kind, episodes)
        rep = prediction_protocol(forecaster_for(run.model, cfg.seed), held_out, cfg.eval.init, (5, horizon))
        out[kind] = {"rmse": rep.rmse[horizon], "rmse_h5": rep.rmse[5], "val_rmse": run.final_rmse,
                     "seconds": run.seconds}
    return out


def ordering_verdict(trials: dict[int, dict]) -> dict:
    """Seed counts for Dirichlet < LSTM and Dirichlet <= deterministic."""
    beats_lstm = sum(t["dirichlet"]["rmse"] < t["lstm"]["rmse"] for t in trials.values())
    ties_det = sum(t["dirichlet"]["rmse"] <= t["deterministic"]["rmse"] for t in trials.values())
    return {"seeds": len(trials), "dirichlet_beats_lstm": beats_lstm, "dirichlet_not_worse_than_det": ties_det,
            "passed": beats_lstm >= 7 and ties_det >= 6}


def probe_trained(model: DynaNet, cfg: ExperimentConfig, n: int | None = None) -> GainProbeReport:
    """Gain probe on fresh staircase-corrupted episodes never seen in training."""
    return gain_probe(model, probe_episodes(cfg, n or cfg.eval.probe_episodes), cfg.seed)


def missing_modality(model: DynaNet, episodes, seed: int, drop: int = -1) -> dict:
    """Posterior-pose RMSE with modality ``drop`` switched off for the last half of every episode.

    Both RMSEs are measured over the dropped half only, where the two runs differ.
    """
    T = len(episodes[0])
    n_mod = len(model.config.modalities)
    present = np.ones((T, n_mod), dtype=bool)
    present[T // 2 :, drop] = False
    tail = slice(T // 2, None)
    full = pose_rmse(model, episodes, seed, steps=tail)
    dropped = pose_rmse(model, episodes, seed, present=present, steps=tail)
    x = np.stack([e.observations for e in episodes])
    with no_tape():
        res = model.run(x, RngStream(seed, (3,)), present)
    finite = all(np.isfinite(s.posterior.z.value).all() and np.isfinite(s.posterior.P.value).all()
                 and np.isfinite(s.y_posterior.value).all() for s in res.steps)
    return {"full_rmse": full, "dropped_rmse": dropped, "ratio": dropped / full, "finite": bool(finite)}
