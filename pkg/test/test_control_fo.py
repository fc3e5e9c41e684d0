"""
Test the feedback optimization controller.
"""
import numpy as np
import pytest

from control_base import ControllerError
from control_fo import (
    FoController, FoControllerState, dual_ascent_update, fo_step, fo_unconstrained_setpoint,
    fo_update_duals, sensitivity_matrix, unconstrained_critical_point, voltage_constraints,
)
from grid import reduced_reactance
from optim import BoxConstraint, CostWeight, cost_weight_for
from sim import sustained_oscillation

LIMITS = (0.95, 1.05)


def canonical_state(feeder, alpha=100.0, X=None, M=None, anti_windup=True):
    if X is None:
        X = sensitivity_matrix(feeder, "published")
    if M is None:
        M = cost_weight_for(feeder, "inverse-limits")
    return FoControllerState.initial(X, M, BoxConstraint.from_model(feeder), alpha, *LIMITS,
                                     anti_windup_enabled=anti_windup)


def test_voltage_constraints():
    A, b = voltage_constraints(0.95, 1.05, 2)
    np.testing.assert_array_equal(A, [[-1, 0], [0, -1], [1, 0], [0, 1]])
    np.testing.assert_array_equal(b, [0.95, 0.95, -1.05, -1.05])
    # A y + b <= 0 inside the limits
    assert np.all(A @ np.array([1.0, 0.96]) + b <= 0)


def test_dual_ascent_is_projected_on_the_positive_orthant():
    A, b = voltage_constraints(0.95, 1.05, 1)
    duals = dual_ascent_update([0.1, 0.1], [1.0], A, b, 10)
    np.testing.assert_allclose(duals, [0, 0])
    duals = dual_ascent_update([0.0, 0.0], [1.07], A, b, 10)
    np.testing.assert_allclose(duals, [0, 0.2])


def test_frozen_duals_keep_their_value():
    A, b = voltage_constraints(0.95, 1.05, 1)
    duals = dual_ascent_update([0.0, 0.3], [1.07], A, b, 10, frozen=np.array([False, True]))
    np.testing.assert_allclose(duals, [0, 0.3])


def test_unconstrained_point_is_the_weighted_transpose(feeder):
    X = sensitivity_matrix(feeder, "published")
    M = cost_weight_for(feeder, "inverse-limits")
    A, _ = voltage_constraints(*LIMITS, 3)
    lambda_min = np.array([0.0, 0.2, 0.0])
    lambda_max = np.array([0.1, 0.0, 0.5])
    expected = M.solve(X.T @ (lambda_min - lambda_max))
    np.testing.assert_allclose(unconstrained_critical_point(np.r_[lambda_min, lambda_max], M, X, A), expected)


def test_first_step_on_the_syslab_overvoltage(feeder):
    state = canonical_state(feeder)
    v = np.array([1.003, 1.0096, 1.0668])
    q = fo_step(state, v)
    np.testing.assert_allclose(state.lambda_min, 0)
    np.testing.assert_allclose(state.lambda_max, [0, 0, 100 * 0.0168])
    expected = -np.array([0.06, 0.06, 0.08]) * np.array([0.09, 0.11, 0.16]) * 1.68
    np.testing.assert_allclose(q, expected)
    np.testing.assert_array_equal(state.last_q, q)
    assert np.all(q < 0)


def test_no_violation_keeps_zero_setpoints(feeder):
    state = canonical_state(feeder)
    for _ in range(5):
        q = fo_step(state, np.array([1.0, 1.0, 1.0]))
    np.testing.assert_array_equal(q, 0)
    np.testing.assert_array_equal(state.duals, 0)


def test_undervoltage_injects_reactive_power(feeder):
    state = canonical_state(feeder)
    q = fo_step(state, np.array([0.94, 0.96, 0.96]))
    assert state.lambda_min[0] == pytest.approx(1.0)
    assert np.all(q > 0)


def test_anti_windup_freezes_the_saturated_multiplier(feeder):
    state = canonical_state(feeder, alpha=1e4)
    for _ in range(3):
        fo_step(state, np.array([1.04, 1.06, 1.2]))
    np.testing.assert_array_equal(state.last_q, state.box.lower)
    frozen = state.lambda_max.copy()
    fo_step(state, np.array([1.04, 1.06, 1.2]))
    np.testing.assert_array_equal(state.lambda_max, frozen)
    assert state.saturation() == (True, False)


def test_without_anti_windup_the_multiplier_grows(feeder):
    state = canonical_state(feeder, alpha=1e4, anti_windup=False)
    for _ in range(3):
        fo_step(state, np.array([1.04, 1.06, 1.2]))
    before = state.lambda_max.copy()
    fo_step(state, np.array([1.04, 1.06, 1.2]))
    assert np.all(state.lambda_max[1:] > before[1:])


def test_anti_windup_releases_a_decreasing_multiplier(feeder):
    state = canonical_state(feeder, alpha=1e4)
    for _ in range(3):
        fo_step(state, np.array([1.04, 1.06, 1.2]))
    before = state.lambda_max.copy()
    fo_step(state, np.array([1.0, 1.0, 1.04]))
    assert state.lambda_max[2] < before[2]


@pytest.mark.parametrize("weight", ["diagonal", "coupled"])
def test_random_steps_keep_the_duals_and_the_box(feeder, rng, weight):
    M = cost_weight_for(feeder, "inverse-limits")
    steps = 10000
    if weight == "coupled":
        M = CostWeight(M.M + 2.0 * (np.ones((3, 3)) - np.eye(3)))
        steps = 1000
    for anti_windup in (True, False):
        state = canonical_state(feeder, alpha=rng.uniform(1, 1e4), M=M, anti_windup=anti_windup)
        for _ in range(steps // 2):
            q = fo_step(state, rng.uniform(0.5, 1.5, 3))
            assert np.all(state.lambda_min >= 0) and np.all(state.lambda_max >= 0)
            assert state.box.contains(q)


def test_update_duals_checks_the_shape(feeder):
    with pytest.raises(ControllerError):
        fo_update_duals(canonical_state(feeder), np.ones(2))


@pytest.mark.parametrize("change", [
    {"alpha": 0},
    {"alpha": -1},
    {"X": np.ones((2, 2))},
    {"v_min": 1.1},
])
def test_invalid_states(feeder, change):
    arguments = dict(
        X=sensitivity_matrix(feeder, "published"), M=cost_weight_for(feeder, "inverse-limits"),
        box=BoxConstraint.from_model(feeder), alpha=100.0, v_min=0.95, v_max=1.05)
    arguments.update(change)
    with pytest.raises(ControllerError):
        FoControllerState.initial(**arguments)


def test_unconstrained_setpoint_of_a_fresh_state_is_zero(feeder):
    np.testing.assert_array_equal(fo_unconstrained_setpoint(canonical_state(feeder)), 0)


@pytest.mark.parametrize("source", ["paper", "published"])
def test_published_sensitivity(feeder, source):
    np.testing.assert_array_equal(sensitivity_matrix(feeder, source), feeder.published_reactance)


def test_computed_and_ones_sensitivity(feeder):
    np.testing.assert_array_equal(sensitivity_matrix(feeder, "computed"), reduced_reactance(feeder))
    np.testing.assert_array_equal(sensitivity_matrix(feeder, "ones"), np.ones((3, 3)))


def test_sensitivity_perturbation(feeder):
    np.testing.assert_allclose(sensitivity_matrix(feeder, "ones", 0.2), 1.2 * np.ones((3, 3)))


@pytest.mark.parametrize("content", [
    "- [1, 0, 0]\n- [0, 1, 0]\n- [0, 0, 1]\n",
    "X: [[1, 0, 0], [0, 1, 0], [0, 0, 1]]\n",
    '{"X": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}',
])
def test_sensitivity_from_a_file(feeder, tmp_path, content):
    path = tmp_path / "x.yml"
    path.write_text(content)
    np.testing.assert_array_equal(sensitivity_matrix(feeder, f"file:{path}"), np.eye(3))


@pytest.mark.parametrize("source", ["measured", "file:/does/not/exist.yml"])
def test_invalid_sensitivity_sources(feeder, source):
    with pytest.raises(ControllerError):
        sensitivity_matrix(feeder, source)


def test_sensitivity_of_the_wrong_shape(feeder, tmp_path):
    path = tmp_path / "x.yml"
    path.write_text("[[1, 0], [0, 1]]")
    with pytest.raises(ControllerError, match="shape"):
        sensitivity_matrix(feeder, f"file:{path}")


def test_controller_reads_its_configuration(feeder):
    controller = FoController(feeder, {"alpha": 10, "x_source": "ones", "anti_windup": False}, LIMITS)
    assert controller.name == "fo"
    assert controller.state.alpha == 10
    assert not controller.state.anti_windup_enabled
    np.testing.assert_array_equal(controller.X, np.ones((3, 3)))
    lambda_min, lambda_max = controller.duals
    np.testing.assert_array_equal(lambda_min, 0)
    np.testing.assert_array_equal(lambda_max, 0)


def test_controller_step_and_reset(feeder):
    controller = FoController(feeder, {"x_source": "published"}, LIMITS)
    q = controller.step([1.003, 1.0096, 1.0668], now=180)
    assert np.all(q < 0)
    np.testing.assert_array_equal(controller.last_q, q)
    assert controller.duals[1][2] > 0
    controller.reset()
    np.testing.assert_array_equal(controller.last_q, 0)
    np.testing.assert_array_equal(controller.state.duals, 0)


def test_controller_checks_the_measurements(feeder):
    controller = FoController(feeder, {}, LIMITS)
    with pytest.raises(ControllerError):
        controller.step([1.0, 1.0], now=0)


def test_controller_rejects_empty_limits(feeder):
    with pytest.raises(ControllerError):
        FoController(feeder, {}, (1.05, 0.95))


NOMINAL_VOLTAGES = np.array([1.003, 1.0096, 1.0668])


def linearized_loop(feeder, alpha, steps=200):
    """Close the loop on v = v0 + X q, return the measured voltages and the set-points."""
    state = canonical_state(feeder, alpha=alpha)
    q = np.zeros(3)
    voltages, setpoints = [], []
    for _ in range(steps):
        v = NOMINAL_VOLTAGES + state.X @ q
        q = fo_step(state, v)
        voltages.append(v)
        setpoints.append(q)
    return np.array(voltages), np.array(setpoints)


def test_the_linearized_loop_converges_to_the_limit(feeder):
    v, q = linearized_loop(feeder, 100)
    assert v[-1][2] == pytest.approx(LIMITS[1], abs=1e-6)
    assert np.all(v[-1] >= LIMITS[0])
    np.testing.assert_allclose(q[-1], [-0.0278, -0.034, -0.0659], atol=1e-3)
    assert not sustained_oscillation(q[-6:], 0.005)


def test_the_linearized_loop_cycles_with_a_hundred_times_the_gain(feeder):
    v, q = linearized_loop(feeder, 1e4)
    assert (v[-6:] - LIMITS[1]).max() > 1e-3
    assert sustained_oscillation(q[-6:], 0.005)
    assert np.any(np.all(q[-6:] == 0, axis=1))


@pytest.mark.parametrize("scale", [0.0, 0.5, 3.0])
def test_the_unconstrained_setpoint_is_linear_in_the_multipliers(feeder, scale):
    state = canonical_state(feeder)
    state.lambda_min = np.array([0.0, 0.2, 0.0])
    state.lambda_max = np.array([0.1, 0.0, 0.5])
    reference = fo_unconstrained_setpoint(state)
    state.lambda_min = scale * state.lambda_min
    state.lambda_max = scale * state.lambda_max
    np.testing.assert_allclose(fo_unconstrained_setpoint(state), scale * reference, atol=1e-12)
