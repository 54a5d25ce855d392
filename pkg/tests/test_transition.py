import numpy as np
import pytest

from dynakf.diffmath import NoiseRecorder, RngStream, ShapeError, grad_check, ops
from dynakf.transition import (
    DivergenceError,
    TransitionHead,
    deterministic_transition,
    dirichlet_transition,
    head_source,
    rollout_decay,
    stability_check,
)


def test_zero_heads_diagonal():
    head = TransitionHead.zeros(4, mode="deterministic")
    pkt = deterministic_transition(head, np.ones((2, 4)), head.initial_state(2))
    np.testing.assert_array_equal(pkt.A.value, 0.0)
    np.testing.assert_array_equal(pkt.Q.value, 1e-4)
    assert pkt.provenance == "deterministic" and pkt.A.shape == (2, 4)


def test_full_layout_reshape():
    head = TransitionHead.init(3, RngStream(0), mode="deterministic", layout="full")
    pkt = deterministic_transition(head, np.ones((5, 3)), head.initial_state(5))
    assert pkt.A.shape == (5, 3, 3) and pkt.Q.shape == (5, 3)


def test_deterministic_gradients_wrt_lstm():
    rng = RngStream(1)
    head = TransitionHead.init(3, rng, mode="deterministic", layout="full")
    z = rng.child(9).normal((2, 3))

    def f():
        pkt = deterministic_transition(head, z, head.initial_state(2))
        return ops.sum(pkt.A) + ops.sum(pkt.Q)

    report = grad_check(f, head.lstm.parameters("lstm."), tolerance=1e-4)
    assert report.passed, report.summary()


def test_dirichlet_full_uniform_mean():
    head = TransitionHead.zeros(2, mode="dirichlet", layout="full")
    head.a_head.bias.value = np.full(4, 1.0 - 1e-4)
    n = 100_000
    pkt = dirichlet_transition(head, np.zeros((n, 2)), head.initial_state(n), RngStream(2))
    np.testing.assert_allclose(pkt.A.value.mean(axis=0), 0.25, atol=0.005)
    np.testing.assert_allclose(pkt.A.value.sum(axis=(1, 2)), 1.0, atol=1e-12)
    np.testing.assert_allclose(pkt.alpha, 1.0)


def test_dirichlet_diagonal_entries_on_simplex():
    rng = RngStream(3)
    head = TransitionHead.init(6, rng, jitter=True)
    pkt = dirichlet_transition(head, rng.child(1).normal((50, 6)), head.initial_state(50), rng.child(2))
    A = pkt.A.value
    assert (A > 0).all() and (A < 1).all()
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    assert all(stability_check(a).contractive for a in A)


def test_dirichlet_gradient_with_frozen_noise():
    rng = RngStream(4)
    head = TransitionHead.init(3, rng, layout="full")
    # concentrations of order one: near the 1e-4 floor the true gradients shrink
    # to ~1e-8 where central differences are pure roundoff
    head.a_head.bias.value = head.a_head.bias.value + 1.0
    z = rng.child(1).normal((4, 3))
    w = rng.child(2).normal((4, 3, 3))
    rec = NoiseRecorder(rng.child(3))
    dirichlet_transition(head, z, head.initial_state(4), rec)
    frozen = rec.frozen()

    def f():
        frozen.rewind()
        return ops.sum(dirichlet_transition(head, z, head.initial_state(4), frozen).A * w)

    params = {**head.a_head.parameters("a_head."), **head.lstm.parameters("lstm.")}
    report = grad_check(f, params, tolerance=1e-3)
    assert report.passed, report.summary()


def test_stability_examples():
    r = stability_check(0.5 * np.eye(3))
    assert r.inf_norm == 0.5 and r.verdict == "contractive"
    assert abs(r.spectral_radius - 0.5) < 1e-12
    r = stability_check(np.array([[0.6, 0.5], [0.1, 0.1]]))
    assert r.inf_norm == pytest.approx(1.1, abs=1e-15) and r.verdict == "not-contractive"
    assert r.row_sums == pytest.approx([1.1, 0.2])
    with pytest.raises(ShapeError):
        stability_check(np.ones((2, 3)))


def test_spectral_radius_rotation_pair():
    th = 0.3
    A = 0.8 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    assert abs(stability_check(A).spectral_radius - 0.8) < 1e-9


def test_stability_report_json():
    import json

    rec = json.loads(stability_check(np.diag([0.2, 0.4])).to_json())
    assert set(rec) == {"inf_norm", "spectral_radius", "row_sums", "verdict"}


def test_rollout_geometric_decay():
    rep = rollout_decay(lambda z: 0.5 * np.eye(2), np.ones(2), 10)
    assert rep.norms[-1] == 2.0**-10
    np.testing.assert_array_equal(rep.norms, rep.bound)


def test_rollout_detects_bound_violation():
    calls = iter([0.1 * np.eye(2)] + [0.9 * np.eye(2)] * 5)

    def lying_source(z):
        return next(calls)

    # the bound tracks the running max, so a genuinely contractive source never trips it
    rollout_decay(lying_source, np.ones(2), 5)
    with pytest.raises(DivergenceError):
        rollout_decay(lambda z: 2.0 * np.eye(2), np.ones(2), 1, slack=-1.0)
    with pytest.raises(ValueError):
        rollout_decay(lambda z: np.eye(2), np.ones(2), 0)


def test_rollout_dirichlet_heads():
    rng = RngStream(5)
    head = TransitionHead.init(4, rng, layout="full")
    z0 = np.array([1.0, -2.0, 0.5, 3.0])
    rep = rollout_decay(head_source(head, rng.child(1)), z0, 50)
    assert rep.norms[-1] < rep.norms[0]
    assert (rep.norms <= rep.bound + 1e-12).all()
    rep = rollout_decay(head_source(head, rng.child(2)), z0, 200)
    assert rep.norms[-1] < 1e-6 * rep.norms[0]


def test_control_input_required():
    head = TransitionHead.init(3, RngStream(6), mode="deterministic", control_dim=1)
    with pytest.raises(ValueError):
        deterministic_transition(head, np.ones((1, 3)), head.initial_state(1))
    pkt = deterministic_transition(head, np.ones((1, 3)), head.initial_state(1), control=np.ones((1, 1)))
    assert pkt.A.shape == (1, 3)
