import numpy as np
import pytest

from mergesurgery.autodiff import DimensionError, NonFiniteError
from mergesurgery.optim import AdamState, adam_step


def test_single_step_scalar_recurrence():
    # m_hat = 0.5, v_hat = 0.25, so the step is lr * 0.5 / (0.5 + eps)
    state = AdamState(lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    out = adam_step(state, {"w": np.array([1.0])}, {"w": np.array([0.5])})
    assert abs(out["w"][0] - 0.999) < 1e-9
    assert state.t == 1


def test_matches_hand_recurrence_over_steps():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=20)
    state = AdamState(lr=0.01)
    w = np.array([0.3])
    m = v = 0.0
    ref = 0.3
    for t, g in enumerate(grads, start=1):
        w = adam_step(state, {"w": w}, {"w": np.array([g])})["w"]
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert state.t == t
    assert w[0] == pytest.approx(ref, abs=1e-12)


def test_zero_gradient_leaves_params_unchanged():
    p = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
    out = adam_step(AdamState(), p, {"a": np.zeros((2, 3), np.float32)})
    assert np.array_equal(out["a"], p["a"])


def test_identical_entries_get_identical_updates():
    out = adam_step(AdamState(), {"w": np.array([2.0, 2.0])}, {"w": np.array([0.7, 0.7])})
    assert out["w"][0] == out["w"][1]


def test_state_shapes_follow_params():
    state = AdamState()
    adam_step(state, {"w": np.ones((3, 2))}, {"w": np.ones((3, 2))})
    assert state.m["w"].shape == state.v["w"].shape == (3, 2)


def test_errors():
    with pytest.raises(DimensionError):
        adam_step(AdamState(), {"w": np.ones(2)}, {"w": np.ones(3)})
    with pytest.raises(DimensionError):
        adam_step(AdamState(), {"w": np.ones(2)}, {"v": np.ones(2)})
    with pytest.raises(NonFiniteError):
        adam_step(AdamState(), {"w": np.array([np.inf])}, {"w": np.array([1.0])})


def test_deterministic_trajectory():
    def run():
        state, w = AdamState(), {"w": np.linspace(-1, 1, 5, dtype=np.float32)}
        for i in range(10):
            w = adam_step(state, w, {"w": np.sin(w["w"] + i).astype(np.float32)})
        return w["w"].tobytes()

    assert run() == run()
