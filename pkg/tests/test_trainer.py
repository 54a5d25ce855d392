import numpy as np
import pytest

from dynakf.diffmath import RngStream
from dynakf.model import DynaNet, ModelConfig
from dynakf.nnkit import load_checkpoint
from dynakf.simlab import SystemSpec, generate_dataset
from dynakf.trainer import (
    BaselineConfig,
    BaselineForecaster,
    LstmBaseline,
    TrainConfig,
    TrainingAborted,
    load_training_state,
    make_windows,
    model_grad_check,
    pose_rmse,
    split_episodes,
    train,
    train_baseline,
)


@pytest.fixture(scope="module")
def planar():
    return generate_dataset(SystemSpec(kind="planar", modalities=(8, 8)), 8, 12, seed=2)


def small_cfg(mode="dirichlet", d=6):
    return ModelConfig(latent_dim=d, modalities=((8, 3), (8, 3)), encoder_hidden=(8,), transition_mode=mode)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(window=1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_window_counts(planar):
    ep = generate_dataset(SystemSpec(kind="planar"), 1, 20, seed=0)[0]
    assert len(make_windows(ep, 5)) == 16
    five = generate_dataset(SystemSpec(kind="planar"), 1, 5, seed=0)[0]
    (only,) = make_windows(five, 5)
    assert np.array_equal(only.observations, five.observations)
    with pytest.raises(ValueError, match="shorter"):
        make_windows(five, 6)


def test_windows_are_aligned_views():
    ep = generate_dataset(SystemSpec(kind="planar"), 1, 20, seed=0)[0]
    wins = make_windows(ep, 5)
    for k, w in enumerate(wins):
        for j in range(5):
            assert np.array_equal(w.observations[j], ep.observations[k + j])
            assert np.array_equal(w.poses[j], ep.poses[k + j])
    assert np.shares_memory(wins[3].observations, ep.observations)


def test_split_is_by_episode(planar):
    tr, va = split_episodes(planar, 0.25, seed=1)
    assert len(tr) == 6 and len(va) == 2
    ids = lambda eps: {e.observations.tobytes() for e in eps}
    assert not ids(tr) & ids(va)
    assert split_episodes(planar, 0.25, seed=1)[1][0] is va[0]


def test_zero_epochs_leaves_model_unchanged(planar):
    m = DynaNet.init(small_cfg(), RngStream(0))
    before = m.state_dict()
    _, hist = train(m, make_windows(planar[0], 5), TrainConfig(epochs=0))
    assert len(hist) == 0
    assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())


def run_training(planar, tmp_path, seed=3, epochs=2):
    m = DynaNet.init(small_cfg(), RngStream(seed))
    wins = [w for e in planar[:6] for w in make_windows(e, 4)]
    cfg = TrainConfig(window=4, batch_size=8, lr=1e-3, epochs=epochs, seed=seed)
    return train(m, wins, cfg, planar[6:], checkpoint_dir=tmp_path)


def test_training_is_bit_reproducible(planar, tmp_path):
    m1, h1 = run_training(planar, tmp_path / "a")
    m2, h2 = run_training(planar, tmp_path / "b")
    assert h1.loss == h2.loss and h1.val_rmse == h2.val_rmse and h1.grad_trace == h2.grad_trace
    assert (tmp_path / "a" / "epoch_002.ckpt").read_bytes() == (tmp_path / "b" / "epoch_002.ckpt").read_bytes()
    assert len(h1) == 2 and len(h1.grad_norm) == 2 and len(h1.seconds) == 2
    assert [r[4] for r in h1.rows()] == ["", ""]


def test_resume_continues_exactly(planar, tmp_path):
    _, full = run_training(planar, tmp_path / "full", epochs=3)
    m = DynaNet.init(small_cfg(), RngStream(3))
    adam, done, _ = load_training_state(tmp_path / "full" / "epoch_002.ckpt", m)
    assert done == 2 and adam.step > 0
    wins = [w for e in planar[:6] for w in make_windows(e, 4)]
    cfg = TrainConfig(window=4, batch_size=8, lr=1e-3, epochs=3, seed=3)
    _, rest = train(m, wins, cfg, planar[6:], checkpoint_dir=tmp_path / "resumed", adam=adam, start_epoch=done)
    assert rest.epochs == [3] and rest.loss == full.loss[2:]
    a = load_checkpoint(tmp_path / "full" / "epoch_003.ckpt")
    b = load_checkpoint(tmp_path / "resumed" / "epoch_003.ckpt")
    assert a.step == b.step
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_single_step_moves_every_group(planar):
    m = DynaNet.init(small_cfg(), RngStream(4))
    before = m.state_dict()
    train(m, make_windows(planar[0], 5)[:4], TrainConfig(epochs=1, batch_size=4))
    moved = {}
    for k, v in m.state_dict().items():
        g = k.split(".")[0] if not k.startswith("transition") else ".".join(k.split(".")[:2])
        moved[g] = moved.get(g, 0.0) + float(np.sum((v - before[k]) ** 2))
    assert all(v > 0 for v in moved.values()), moved


def test_non_finite_loss_aborts_with_dump(planar, tmp_path):
    m = DynaNet.init(small_cfg(), RngStream(0))
    wins = make_windows(planar[0], 5)
    bad = wins[2].replace(poses=np.full_like(wins[2].poses, np.nan))
    wins = wins[:2] + [bad] + wins[3:]
    with pytest.raises(TrainingAborted) as err:
        train(m, wins, TrainConfig(epochs=1, batch_size=2, seed=0), checkpoint_dir=tmp_path)
    assert err.value.epoch == 0 and err.value.batch >= 0
    ck = load_checkpoint(err.value.checkpoint)
    assert ck.config["aborted_batch"] == err.value.batch


def test_baseline_capacity_close_to_model():
    cfg = ModelConfig(latent_dim=16, modalities=((32, 8), (32, 8)), encoder_hidden=(64,))
    model = DynaNet.init(cfg, RngStream(0))
    base = LstmBaseline.init(BaselineConfig.matching(cfg), RngStream(0))
    ratio = base.parameter_count() / model.parameter_count()
    assert 0.5 <= ratio <= 2.0
    assert base.config.hidden == cfg.latent_dim


def test_baseline_learns_linear_ssm():
    spec = SystemSpec(kind="linear", modalities=(8,), latent_dim=4)
    eps = generate_dataset(spec, 10, 20, seed=1)
    wins = [w for e in eps for w in make_windows(e, 5)]
    base = LstmBaseline.init(BaselineConfig(hidden=8, modalities=((8, 4),), encoder_hidden=(16,)), RngStream(0))
    _, hist = train_baseline(base, wins, TrainConfig(epochs=12, lr=3e-3, batch_size=16))
    assert hist.loss[-1] < 0.5 * hist.loss[0]


def test_baseline_forecast_shape(planar):
    base = LstmBaseline.init(BaselineConfig(hidden=6, modalities=((8, 3), (8, 3)), encoder_hidden=(8,)), RngStream(0))
    out = BaselineForecaster(base).forecast(planar[0], 5, 7)
    assert out.shape == (7, 6) and np.isfinite(out).all()
    assert np.isfinite(pose_rmse(base, planar))


@pytest.mark.parametrize("mode,tol", [("deterministic", 1e-4), ("dirichlet", 1e-3)])
def test_model_grad_check_tiny(mode, tol):
    ep = generate_dataset(SystemSpec(kind="planar", modalities=(8,)), 1, 3, seed=4)[0]
    cfg = ModelConfig(latent_dim=3, modalities=((8, 3),), encoder_hidden=(4,), transition_mode=mode)
    rep = model_grad_check(DynaNet.init(cfg, RngStream(1)), ep, seed=1)
    assert rep.tolerance == tol
    assert rep.passed, rep.summary()
    assert {g.group for g in rep.groups} == {"encoder0", "transition.lstm", "transition.a_head",
                                             "transition.q_head", "predictor"}


def test_model_grad_check_zero_model():
    ep = generate_dataset(SystemSpec(kind="planar", modalities=(8,)), 1, 3, seed=4)[0]
    cfg = ModelConfig(latent_dim=3, modalities=((8, 3),), encoder_hidden=(4,), transition_mode="deterministic")
    rep = model_grad_check(DynaNet.zeros(cfg), ep)
    assert rep.passed, rep.summary()
    assert all(np.isfinite(g.max_rel_error) for g in rep.groups)


def test_model_grad_check_rejects_large_models(planar):
    with pytest.raises(ValueError, match="tiny"):
        model_grad_check(DynaNet.init(small_cfg(), RngStream(0)), make_windows(planar[0], 3)[0])
