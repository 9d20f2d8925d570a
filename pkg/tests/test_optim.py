"""Unit tests for Adam, the learning-rate schedule and the gradient checker."""

from __future__ import annotations

import math

import numpy as np
import pytest

from src.optim import (
    AdamState,
    LinearSchedule,
    OptimizerError,
    ParamGroup,
    adam_step,
    gradcheck,
    schedule_factor,
)


def _scalar_adam(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain-Python Adam on a list of floats."""
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    trajectory = []
    for step, grad in enumerate(grads, start=1):
        for i, g in enumerate(grad):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            m_hat = m[i] / (1 - beta1 ** step)
            v_hat = v[i] / (1 - beta2 ** step)
            theta[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
        trajectory.append(list(theta))
    return trajectory


def test_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState([ParamGroup("main", params, lr=0.1)])
    adam_step(state, {"w": np.zeros(3)})
    assert params["w"].tolist() == [1.0, -2.0, 3.0]
    assert state.step == 1


def test_first_step_moves_by_learning_rate():
    params = {"w": np.zeros(4)}
    state = AdamState([ParamGroup("main", params, lr=0.01)])
    grad = np.array([3.0, -0.5, 20.0, -7.0])
    adam_step(state, {"w": grad})
    assert np.allclose(params["w"], -0.01 * np.sign(grad), atol=1e-9)


def test_matches_scalar_reference():
    params = {"w": np.array([0.5, -1.5, 2.0])}
    state = AdamState([ParamGroup("main", params, lr=0.05)])
    grads = [[0.3, -1.2, 4.0], [-0.7, 0.1, 2.5]]
    expected = _scalar_adam([0.5, -1.5, 2.0], grads, lr=0.05)
    for grad, target in zip(grads, expected):
        adam_step(state, {"w": np.array(grad)})
        assert np.max(np.abs(params["w"] - target)) < 1e-12


def test_groups_use_their_own_rate_and_the_schedule_factor():
    a, b = {"a": np.zeros(1)}, {"b": np.zeros(1)}
    state = AdamState([ParamGroup("slow", a, lr=0.001), ParamGroup("fast", b, lr=0.1)])
    adam_step(state, {"a": np.ones(1), "b": np.ones(1)}, factor=0.5)
    assert a["a"][0] == pytest.approx(-0.0005, abs=1e-9)
    assert b["b"][0] == pytest.approx(-0.05, abs=1e-9)


def test_bad_gradients_are_rejected_before_any_update():
    params = {"x": np.ones(2), "y": np.ones(2)}
    state = AdamState([ParamGroup("main", params, lr=0.1)])
    with pytest.raises(OptimizerError, match="y"):
        adam_step(state, {"x": np.ones(2), "y": np.array([1.0, np.nan])})
    assert params["x"].tolist() == [1.0, 1.0]
    assert state.step == 0
    with pytest.raises(OptimizerError):
        adam_step(state, {"x": np.ones(2)})
    with pytest.raises(OptimizerError):
        adam_step(state, {"x": np.ones(2), "y": np.ones(3)})
    with pytest.raises(OptimizerError):
        AdamState([ParamGroup("a", {"x": np.ones(1)}, 0.1), ParamGroup("b", {"x": np.ones(1)}, 0.1)])


def test_same_inputs_give_identical_trajectories():
    def run():
        params = {"w": np.linspace(-1, 1, 5)}
        state = AdamState([ParamGroup("main", params, lr=0.02)])
        rng = np.random.default_rng(4)
        for _ in range(20):
            adam_step(state, {"w": rng.normal(size=5)})
        return params["w"]

    assert run().tobytes() == run().tobytes()


def test_schedule_endpoints():
    sched = LinearSchedule(1.0, 0.1, 1000)
    assert schedule_factor(0, sched) == 1.0
    assert schedule_factor(500, sched) == 0.55
    assert schedule_factor(1000, sched) == 0.1
    assert schedule_factor(5000, sched) == 0.1
    assert schedule_factor(250, sched) == pytest.approx(0.775)
    with pytest.raises(OptimizerError):
        schedule_factor(-1, sched)
    with pytest.raises(OptimizerError):
        LinearSchedule(1.0, 0.0, 10)
    with pytest.raises(OptimizerError):
        LinearSchedule(1.0, 0.1, 0)


def test_gradcheck_on_quadratic():
    theta = np.random.default_rng(0).normal(size=(3, 4))
    params = {"theta": theta}
    # Central differences are exact on a quadratic
    report = gradcheck(lambda p: 0.5 * float(np.sum(p["theta"] ** 2)), params, {"theta": theta.copy()}, h=1e-3)
    assert report.max_rel_error < 1e-9
    assert report.passed
    assert report.tensors[0].checked == 12
    assert "PASS" in report.format()
    # Coordinates are restored
    assert np.array_equal(params["theta"], theta)


def test_gradcheck_ignored_parameter_is_zero_both_ways():
    params = {"used": np.array([1.0, 2.0]), "unused": np.array([5.0])}
    report = gradcheck(
        lambda p: float(np.sum(p["used"] ** 2)),
        params,
        {"used": 2.0 * params["used"], "unused": np.zeros(1)},
    )
    unused = [t for t in report.tensors if t.name == "unused"][0]
    assert unused.max_abs_error == 0.0
    assert report.passed


def test_gradcheck_flags_wrong_gradient():
    params = {"w": np.array([1.0, -1.0])}
    report = gradcheck(lambda p: float(np.sum(p["w"] ** 2)), params, {"w": np.array([2.0, 0.0])})
    assert not report.passed
    assert "FAIL" in report.format()


def test_gradcheck_samples_coordinates():
    params = {"w": np.arange(100.0)}
    report = gradcheck(lambda p: float(np.sum(p["w"])), params, {"w": np.ones(100)}, max_coords=7, seed=3)
    assert report.tensors[0].checked == 7


def test_gradcheck_rejects_nondeterministic_loss():
    rng = np.random.default_rng(1)
    with pytest.raises(OptimizerError):
        gradcheck(lambda p: float(rng.normal()), {"w": np.zeros(1)}, {"w": np.zeros(1)})


def test_gradcheck_floor_sets_the_absolute_scale():
    params = {"w": np.array([1.0, -2.0, 0.5])}

    def loss(p):
        return 1e-8 * float(np.sum(p["w"] ** 2))

    # True gradient is 2e-8 * w; the supplied one is half of it
    wrong = {"w": 1e-8 * params["w"]}
    lenient = gradcheck(loss, params, wrong)
    assert lenient.passed
    assert lenient.tensors[0].max_abs_error == pytest.approx(2e-8, rel=1e-3)
    strict = gradcheck(loss, params, wrong, floor=1e-12)
    assert not strict.passed
    assert strict.max_rel_error == pytest.approx(0.5, rel=1e-3)
