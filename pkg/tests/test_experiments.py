from pathlib import Path

import numpy as np
import pytest

from dynakf import cli, experiments
from dynakf.experiments import (
    DESK,
    desk_config,
    init_model,
    missing_modality,
    ordering_trial,
    ordering_verdict,
    probe_trained,
    train_desk,
)
from dynakf.model import DynaNet
from dynakf.trainer import LstmBaseline

ROOT = Path(__file__).resolve().parents[1]
TINY = {"data.episodes": 6, "data.length": 20, "train.epochs": 1, "eval.probe_episodes": 3}


def test_desk_toml_mirrors_builtin_desk_config():
    from_file = cli.build_config(cli.read_config_file(ROOT / "configs" / "desk.toml"), env={})
    assert from_file.to_dict() == desk_config(0).to_dict()
    assert DESK["model"]["latent_dim"] == 16 and DESK["model"]["layout"] == "diagonal"


def test_smoke_toml_parses():
    cfg = cli.build_config(cli.read_config_file(ROOT / "configs" / "smoke.toml"), env={})
    assert cfg.seed == 3 and cfg.model.latent_dim == 6


def test_desk_config_overrides_and_seed():
    cfg = desk_config(4, **{"train.epochs": 2})
    assert cfg.seed == 4 and cfg.train.seed == 4 and cfg.train.epochs == 2
    assert cfg.model.transition_mode == "dirichlet"


def test_init_model_kinds():
    cfg = desk_config(0)
    det = init_model(cfg, "deterministic")
    assert isinstance(det, DynaNet) and det.config.transition_mode == "deterministic"
    assert isinstance(init_model(cfg, "lstm"), LstmBaseline)
    with pytest.raises(ValueError):
        init_model(cfg, "gru")


def test_ordering_verdict_thresholds():
    def trial(d, det, lstm):
        return {"dirichlet": {"rmse": d}, "deterministic": {"rmse": det}, "lstm": {"rmse": lstm}}

    good = {s: trial(1.0, 1.0 if s < 6 else 0.5, 2.0 if s < 7 else 0.5) for s in range(10)}
    v = ordering_verdict(good)
    assert v["dirichlet_beats_lstm"] == 7 and v["dirichlet_not_worse_than_det"] == 6 and v["passed"]
    bad = {s: trial(1.0, 1.0 if s < 5 else 0.5, 2.0) for s in range(10)}
    assert not ordering_verdict(bad)["passed"]


def test_tiny_desk_pipeline_runs_end_to_end():
    cfg = desk_config(0, **TINY)
    run = train_desk(cfg)
    assert np.isfinite(run.final_rmse) and run.untrained_rmse > 0 and len(run.history.loss) == 1
    rep = probe_trained(run.model, cfg)
    assert rep.levels == [0.0, 0.3, 0.5, 0.75, 0.8125, 1.0]
    drop = missing_modality(run.model, run.val_episodes, 0, drop=0)
    assert drop["finite"] and drop["ratio"] > 0


def test_ordering_trial_reuses_given_run(monkeypatch):
    cfg = desk_config(0, **TINY)
    run = train_desk(cfg, "dirichlet")
    calls = []
    real = experiments.train_desk
    monkeypatch.setattr(experiments, "train_desk", lambda c, k, e=None: calls.append(k) or real(c, k, e))
    out = ordering_trial(0, reuse={"dirichlet": run}, **TINY)
    assert calls == ["deterministic", "lstm"]
    assert set(out) == {"dirichlet", "deterministic", "lstm"}
    assert all(np.isfinite(v["rmse"]) for v in out.values())
