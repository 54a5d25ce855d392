import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dynakf import cli
from dynakf.evalkit import integrate_poses
from dynakf.nnkit import load_checkpoint
from dynakf.simlab import load_episode

CONFIG = """
seed = 3
[system]
kind = "planar"
modalities = [8, 8]
[model]
latent_dim = 6
modalities = [[8, 3], [8, 3]]
encoder_hidden = [8]
[train]
epochs = 2
batch_size = 16
[data]
episodes = 5
length = 16
[eval]
segments = [2.0, 4.0]
probe_episodes = 4
stability_samples = 200
stability_steps = 50
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.toml").write_text(CONFIG)
    assert run("simulate", "--config", root / "c.toml", "--out", root / "data") == 0
    assert run("simulate", "--config", root / "c.toml", "--out", root / "test", "--seed", 11) == 0
    assert run("train", "--config", root / "c.toml", "--data", root / "data", "--out", root / "tr") == 0
    return root


def files_of(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_simulate_is_byte_identical(ws, tmp_path):
    assert run("simulate", "--config", ws / "c.toml", "--out", tmp_path / "again") == 0
    assert files_of(ws / "data") == files_of(tmp_path / "again")
    man = json.loads((ws / "data" / "manifest.json").read_text())
    assert man["episodes"] == 5 and man["path_check_max_error"] < 1e-9
    assert all((ws / "data" / f).exists() for f in man["files"])


def test_simulate_planar_round_trip(ws, tmp_path):
    assert run("simulate", "--config", ws / "c.toml", "--out", tmp_path, "--episodes", 1, "--length", 100) == 0
    lines = (tmp_path / "episodes" / "ep_00000.jsonl").read_text().splitlines()
    assert len(lines) == 100
    ep = load_episode(tmp_path / "episodes" / "ep_00000.jsonl")
    assert np.max(np.abs(integrate_poses(ep.poses) - ep.abs_path)) < 1e-9


def test_simulate_zero_episodes(tmp_path):
    assert run("simulate", "--out", tmp_path, "--episodes", 0) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["episodes"] == 0 and man["files"] == []


def test_env_seed_and_flag_precedence(ws, monkeypatch):
    raw = cli.read_config_file(ws / "c.toml")
    assert cli.build_config(raw, env={}).seed == 3
    assert cli.build_config(raw, env={"DYNAKF_SEED": "8"}).seed == 8
    assert cli.build_config(raw, {"seed": 5}, env={"DYNAKF_SEED": "8"}).seed == 5
    cfg = cli.build_config(raw, {"train.epochs": 7}, env={})
    assert cfg.train.epochs == 7 and cfg.train.batch_size == 16 and cfg.train.seed == 3
    assert cli.build_config({}, env={}).train.epochs == 30


def test_json_config_accepted(ws, tmp_path):
    raw = cli.read_config_file(ws / "c.toml")
    (tmp_path / "c.json").write_text(json.dumps(raw))
    assert cli.build_config(cli.read_config_file(tmp_path / "c.json"), env={}).to_dict() == \
        cli.build_config(raw, env={}).to_dict()


def test_train_outputs_and_manifest(ws):
    man = json.loads((ws / "tr" / "manifest.json").read_text())
    assert man["mode"] == "dirichlet/diagonal"
    assert man["checkpoints"] == ["checkpoints/epoch_001.ckpt", "checkpoints/epoch_002.ckpt", "model.ckpt"]
    assert man["wall_clock_seconds"] is None
    rows = list(csv.reader((ws / "tr" / "history.csv").open()))
    assert rows[0] == ["epoch", "loss", "val_rmse", "grad_norm", "seconds"]
    assert len(rows) == 3


def test_train_reproduces_history_exactly(ws, tmp_path):
    assert run("train", "--config", ws / "c.toml", "--data", ws / "data", "--out", tmp_path) == 0
    assert files_of(ws / "tr") == files_of(tmp_path)


def test_manifest_records_mode(ws, tmp_path):
    assert run("train", "--config", ws / "c.toml", "--data", ws / "data", "--out", tmp_path, "--mode",
               "deterministic", "--epochs", 1) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["mode"] == "deterministic/diagonal"
    assert load_checkpoint(tmp_path / "model.ckpt").config["model"]["transition_mode"] == "deterministic"


def test_resume_continues_step_counter(ws, tmp_path):
    one = load_checkpoint(ws / "tr" / "checkpoints" / "epoch_001.ckpt")
    assert run("train", "--config", ws / "c.toml", "--data", ws / "data", "--out", tmp_path, "--epochs", 3,
               "--resume", ws / "tr" / "checkpoints" / "epoch_002.ckpt") == 0
    three = load_checkpoint(tmp_path / "model.ckpt")
    assert three.step == 3 * one.step
    assert three.config["epoch"] == 3


def test_dim_mismatch_is_config_error(ws, tmp_path):
    assert run("train", "--config", ws / "c.toml", "--data", ws / "data", "--out", tmp_path,
               "--latent-dim", 4) == cli.EXIT_CONFIG  # features 3+3 exceed d=4
    (tmp_path / "wide.toml").write_text(CONFIG.replace("[system]\nkind = \"planar\"\nmodalities = [8, 8]",
                                                       "[system]\nkind = \"planar\"\nmodalities = [8, 9]"))
    assert run("simulate", "--config", tmp_path / "wide.toml", "--out", tmp_path / "wide") == 0
    assert run("eval", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt", "--data",
               tmp_path / "wide", "--out", tmp_path / "ev") == cli.EXIT_CONFIG


def test_exit_codes(ws, tmp_path):
    (tmp_path / "bad.toml").write_text("[train]\nlr = -1.0\n")
    assert run("simulate", "--config", tmp_path / "bad.toml", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    (tmp_path / "junk.toml").write_text("[[[")
    assert run("simulate", "--config", tmp_path / "junk.toml", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("eval", "--checkpoint", tmp_path / "missing.ckpt", "--data", ws / "test",
               "--out", tmp_path / "y") == cli.EXIT_IO
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    assert run("eval", "--checkpoint", tmp_path / "bad.ckpt", "--data", ws / "test",
               "--out", tmp_path / "y") == cli.EXIT_IO
    with pytest.raises(SystemExit) as err:
        run("bogus")
    assert err.value.code == 2


def test_nan_abort_exit_code(ws, tmp_path):
    from dynakf.simlab import load_dataset, save_episode

    eps = load_dataset(sorted((ws / "data" / "episodes").glob("*.bin")))
    bad = eps[0].replace(observations=np.full_like(eps[0].observations, np.nan))
    (tmp_path / "d" / "episodes").mkdir(parents=True)
    for i, ep in enumerate([bad] + eps[1:]):
        save_episode(ep, tmp_path / "d" / "episodes" / f"ep_{i:05d}")
    code = run("train", "--config", ws / "c.toml", "--data", tmp_path / "d", "--out", tmp_path / "o",
               "--epochs", 1)
    assert code == cli.EXIT_NUMERIC
    assert (tmp_path / "o" / "checkpoints" / "aborted.ckpt").exists()


def test_eval_gt_as_estimate_is_zero(ws, tmp_path):
    assert run("eval", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt", "--data", ws / "test",
               "--out", tmp_path, "--estimate", "gt") == 0
    rows = list(csv.reader((tmp_path / "drift.csv").open()))
    assert rows[0] == ["episode", "t_rel", "r_rel", "segments"]
    assert all(float(r[1]) == 0.0 and float(r[2]) == 0.0 for r in rows[1:])


def test_eval_outputs(ws, tmp_path):
    assert run("eval", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt", "--data", ws / "test",
               "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "prediction.csv").open()))
    assert rows[0] == ["episode", "rmse_h5", "rmse_h10"]
    traj = list(csv.reader((tmp_path / "traj_best_pred.csv").open()))
    assert traj[0] == ["t", "x", "y", "z", "roll", "pitch", "yaw"] and len(traj) == 12
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert summary["t_rel"] >= 0 and summary["posterior_rmse"] > 0


def test_predict_and_baseline(ws, tmp_path):
    assert run("train-baseline", "--config", ws / "c.toml", "--data", ws / "data", "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["mode"] == "lstm"
    assert run("predict", "--config", ws / "c.toml", "--checkpoint", tmp_path / "b" / "model.ckpt", "--data",
               ws / "test", "--out", tmp_path / "p", "--horizons", 3, 6) == 0
    rows = list(csv.reader((tmp_path / "p" / "prediction.csv").open()))
    assert rows[0] == ["episode", "rmse_h3", "rmse_h6"] and len(rows) == 6
    assert run("predict", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt", "--data",
               ws / "test", "--out", tmp_path / "p2", "--init", 10, "--horizons", 10) == cli.EXIT_CONFIG


def test_probe_staircase_and_zero(ws, tmp_path):
    assert run("probe", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt",
               "--out", tmp_path / "s") == 0
    rows = list(csv.reader((tmp_path / "s" / "probe.csv").open()))
    assert rows[0] == ["level", "mean_K_frob", "mean_R", "mean_Q", "mean_abs_r"]
    assert [float(r[0]) for r in rows[1:]] == [0.0, 0.3, 0.5, 0.75, 0.8125, 1.0]
    assert run("probe", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt",
               "--out", tmp_path / "z", "--schedule", "zero") == 0
    assert len(list(csv.reader((tmp_path / "z" / "probe.csv").open()))) == 2
    assert run("probe", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt",
               "--out", tmp_path / "s2") == 0
    assert files_of(tmp_path / "s") == files_of(tmp_path / "s2")
    assert run("probe", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt", "--data",
               ws / "test", "--episodes", 3, "--out", tmp_path / "d") == 0


def test_grad_check_command(tmp_path):
    assert run("grad-check", "--out", tmp_path) == 0
    body = json.loads((tmp_path / "grad_check.json").read_text())
    assert body["deterministic"]["passed"] and body["dirichlet"]["passed"]


def test_stability_report(ws, tmp_path):
    assert run("stability-report", "--config", ws / "c.toml", "--out", tmp_path / "a") == 0
    body = json.loads((tmp_path / "a" / "stability.json").read_text())
    assert body["all_contractive"] and body["rollout_within_bound"] and body["samples"] == 200
    assert run("stability-report", "--config", ws / "c.toml", "--checkpoint", ws / "tr" / "model.ckpt",
               "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "stability.json").read_text())["max_inf_norm"] < 1.0


def test_run_manifest_reproduces(ws, tmp_path):
    assert run("run", "--manifest", ws / "tr" / "manifest.json", "--out", tmp_path) == 0
    assert files_of(ws / "tr") == files_of(tmp_path)


def test_threads_flag(ws, tmp_path):
    assert run("--threads", 1, "simulate", "--config", ws / "c.toml", "--out", tmp_path) == 0
    assert files_of(ws / "data") == files_of(tmp_path)
