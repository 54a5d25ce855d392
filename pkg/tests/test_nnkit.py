import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynakf.diffmath import RngStream, ShapeError, Tape, Tensor, grad_check, ops
from dynakf.nnkit import (
    AdamState,
    CheckpointCorruptError,
    CheckpointVersionError,
    Dense,
    LstmCellParams,
    LstmState,
    MlpParams,
    NonFiniteGradientError,
    adam_step,
    load_checkpoint,
    lstm_gates,
    lstm_step,
    mlp_forward,
    save_checkpoint,
)
from dynakf.nnkit.checkpoint import encode

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_identity_layer():
    net = MlpParams([Dense(Tensor(np.eye(3)), Tensor(np.zeros(3)), "none")])
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(mlp_forward(net, x).value, x)


def test_bias_passthrough():
    net = MlpParams([Dense(Tensor(np.zeros((4, 2))), Tensor(np.array([1.0, 2.0])), "relu")])
    np.testing.assert_array_equal(mlp_forward(net, np.ones(4)).value, [1.0, 2.0])


def test_layer_chain_and_input_checked():
    with pytest.raises(ShapeError):
        MlpParams([Dense.zeros(3, 4), Dense.zeros(5, 2)])
    net = MlpParams.zeros([3, 4], ["relu"])
    with pytest.raises(ShapeError):
        mlp_forward(net, np.ones((2, 5)))


def test_two_layer_gradients():
    rng = RngStream(0)
    net = MlpParams.init([5, 7, 3], ["tanh", "sigmoid"], rng)
    x = rng.child(9).normal((4, 5))
    w = rng.child(10).normal((4, 3))
    report = grad_check(lambda: ops.sum(mlp_forward(net, x) * w), net.parameters(), tolerance=1e-6)
    assert report.passed, report.summary()


def test_glorot_init_range():
    layer = Dense.init(30, 10, RngStream(1))
    assert np.abs(layer.weight.value).max() <= np.sqrt(6 / 40)


def test_lstm_zero_params():
    p = LstmCellParams.zeros(3, 4)
    gates = lstm_gates(p, Tensor(np.ones((1, 3))), LstmState.zeros(4))
    for k in ("input", "forget", "output"):
        np.testing.assert_array_equal(gates[k].value, 0.5)
    np.testing.assert_array_equal(gates["cell"].value, 0.0)
    h, st_ = lstm_step(p, np.ones((1, 3)), LstmState.zeros(4))
    np.testing.assert_array_equal(h.value, 0.0)
    np.testing.assert_array_equal(st_.c.value, 0.0)


def test_lstm_saturated_forget_gate_keeps_cell():
    p = LstmCellParams.zeros(2, 3)
    p.bias.value[3:6] = 100.0
    c0 = np.ones((1, 3))
    _, st_ = lstm_step(p, np.ones((1, 2)), LstmState(Tensor(np.zeros((1, 3))), Tensor(c0)))
    np.testing.assert_allclose(st_.c.value, c0, atol=1e-12)


def test_lstm_forget_bias_init():
    p = LstmCellParams.init(3, 4, RngStream(2))
    np.testing.assert_array_equal(p.bias.value[4:8], 1.0)
    np.testing.assert_array_equal(p.bias.value[:4], 0.0)


def test_lstm_step_gradients():
    rng = RngStream(3)
    p = LstmCellParams.init(3, 4, rng)
    x = rng.child(5).normal((2, 3))
    s = LstmState(Tensor(rng.child(6).normal((2, 4))), Tensor(rng.child(7).normal((2, 4))))
    w = rng.child(8).normal((2, 4))
    wc = rng.child(9).normal((2, 4))

    def f():
        h, ns = lstm_step(p, x, s)
        return ops.sum(h * w) + ops.sum(ns.c * wc)

    report = grad_check(f, p.parameters(), tolerance=1e-4)
    assert report.passed, report.summary()


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_lstm_gate_ranges(seed):
    rng = RngStream(seed)
    p = LstmCellParams.init(4, 5, rng)
    p.w_input.value = p.w_input.value * 20
    x = Tensor(rng.child(1).normal((3, 4)) * 5)
    g = lstm_gates(p, x, LstmState(Tensor(rng.child(2).normal((3, 5))), Tensor(np.zeros((3, 5)))))
    for k in ("input", "forget", "output"):
        assert (g[k].value >= 0).all() and (g[k].value <= 1).all()
    assert (np.abs(g["cell"].value) <= 1).all()


def test_lstm_shape_checks():
    p = LstmCellParams.zeros(3, 4)
    with pytest.raises(ShapeError):
        lstm_step(p, np.ones((1, 2)), LstmState.zeros(4))
    with pytest.raises(ShapeError):
        lstm_step(p, np.ones((2, 3)), LstmState.zeros(4, batch=1))


def test_encoder_lstm_predictor_chain_gradients():
    rng = RngStream(4)
    enc = MlpParams.init([6, 5, 4], ["relu", "tanh"], rng.child(0))
    cell = LstmCellParams.init(4, 4, rng.child(1))
    pred = MlpParams.init([4, 3], ["none"], rng.child(2))
    xs = rng.child(3).normal((3, 2, 6))
    params = {**enc.parameters("enc."), **cell.parameters("lstm."), **pred.parameters("pred.")}

    def f():
        s = LstmState.zeros(4, batch=2)
        total = Tensor(0.0)
        for t in range(3):
            h, s = lstm_step(cell, mlp_forward(enc, xs[t]), s)
            total = total + ops.sum(ops.square(mlp_forward(pred, h)))
        return total

    report = grad_check(f, params, tolerance=1e-4)
    assert report.passed, report.summary()


# --- Adam -------------------------------------------------------------------


def test_adam_first_step_is_sign_step():
    w = Tensor(np.array([1.0]))
    adam = AdamState(lr=0.1)
    adam_step(adam, {"w": w}, {"w": np.array([2.0])})
    np.testing.assert_allclose(w.value, 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), rtol=0, atol=1e-15)
    assert adam.step == 1


def test_adam_zero_gradient():
    w = Tensor(np.array([0.3, -0.2]))
    adam = AdamState(lr=0.1)
    adam_step(adam, {"w": w}, {"w": np.zeros(2)})
    np.testing.assert_array_equal(w.value, [0.3, -0.2])
    np.testing.assert_array_equal(adam.m["w"], 0.0)
    np.testing.assert_array_equal(adam.v["w"], 0.0)
    assert adam.step == 1


def test_adam_quadratic_bowl():
    w0 = RngStream(5).normal(4)
    w = Tensor(w0 / np.linalg.norm(w0))
    adam = AdamState(lr=0.05)
    for _ in range(200):
        with Tape() as tape:
            loss = ops.sum(ops.square(w))
        adam_step(adam, {"w": w}, {"w": tape.backward(loss)[w]})
    assert np.linalg.norm(w.value) < 0.01


def test_adam_errors_name_parameter():
    w = Tensor(np.ones(2))
    with pytest.raises(NonFiniteGradientError, match="'enc.weight'"):
        adam_step(AdamState(), {"enc.weight": w}, {"enc.weight": np.array([1.0, np.nan])})
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"w": w}, {"w": np.ones(3)})
    np.testing.assert_array_equal(w.value, 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_adam_layout_invariance(seed):
    rng = RngStream(seed)
    p0 = rng.normal((3, 4))
    grads = [rng.child(i).normal((3, 4)) for i in range(3)]
    a, b = Tensor(p0.copy()), Tensor(p0.reshape(-1).copy())
    sa, sb = AdamState(lr=0.01), AdamState(lr=0.01)
    for g in grads:
        adam_step(sa, {"p": a}, {"p": g})
        adam_step(sb, {"p": b}, {"p": g.reshape(-1)})
    assert a.value.reshape(-1).tobytes() == b.value.tobytes()


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = RngStream(6)
    tensors = {"enc.0.weight": rng.normal((5, 3)), "scalar": np.array(np.pi), "empty": np.zeros((0, 2))}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, {"latent_dim": 3}, step=17)
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.config == {"latent_dim": 3}
    assert list(ck.tensors) == list(tensors)
    for k, v in tensors.items():
        assert ck.tensors[k].shape == v.shape
        assert ck.tensors[k].tobytes() == v.tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    data = path.read_bytes()
    for cut in (5, 20, len(data) - 9, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(encode({"w": np.ones(2)}, version=99))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_checkpoint_flipped_byte(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones(3)})
    data = bytearray(path.read_bytes())
    data[-12] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_checkpoint_header_is_little_endian(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones(1)}, step=3)
    data = path.read_bytes()
    assert data[:8] == b"DKFCKPT\x00"
    assert struct.unpack("<IQ", data[8:20]) == (1, 3)
