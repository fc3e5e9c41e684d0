"""
Test the droop curve and the droop controller.
"""
import numpy as np
import pytest

from control_base import ControllerError
from control_droop import DroopController, DroopParams, droop_step, droop_target

PARAMS = DroopParams(q_min=-1.0, q_max=1.0, damping=1.0)
BREAKPOINTS = [0.95, 0.99, 1.01, 1.05]


@pytest.mark.parametrize("v,q", [
    (0.90, 1.0),
    (0.95, 1.0),
    (0.97, 0.5),
    (0.99, 0.0),
    (1.00, 0.0),
    (1.01, 0.0),
    (1.03, -0.5),
    (1.05, -1.0),
    (1.20, -1.0),
])
def test_droop_curve(v, q):
    assert droop_target(PARAMS, v) == pytest.approx(q)


@pytest.mark.parametrize("breakpoint", BREAKPOINTS)
def test_droop_curve_is_continuous_at_the_breakpoints(breakpoint):
    at = droop_target(PARAMS, breakpoint)
    for epsilon in (1e-14, -1e-14):
        assert abs(droop_target(PARAMS, breakpoint + epsilon) - at) <= 1e-12


def test_droop_curve_is_not_increasing():
    targets = droop_target(PARAMS, np.linspace(0.8, 1.2, 4001))
    assert np.all(np.diff(targets) <= 0)


def test_droop_curve_with_limits_per_der():
    params = DroopParams(q_min=np.array([-0.06, -0.08]), q_max=np.array([0.06, 0.08]))
    np.testing.assert_allclose(droop_target(params, np.array([1.1, 0.9])), [-0.06, 0.08])
    np.testing.assert_allclose(droop_target(params, np.array([1.03, 1.03])), [-0.03, -0.04])


def test_droop_step_moves_by_the_damping():
    params = DroopParams(q_min=-1.0, q_max=1.0, damping=0.5)
    assert droop_step(params, 1.1, 0.0) == pytest.approx(-0.5)
    assert droop_step(params, 1.1, -0.5) == pytest.approx(-0.75)
    assert droop_step(params, 1.0, -0.5) == pytest.approx(-0.25)


def test_droop_step_approaches_the_curve():
    params = DroopParams(q_min=-1.0, q_max=1.0, damping=0.5)
    q = 0.0
    for _ in range(40):
        q = droop_step(params, 1.2, q)
    assert q == pytest.approx(-1.0, abs=1e-9)
    assert q >= -1.0


@pytest.mark.parametrize("change", [
    {"v1": 1.0},
    {"v3": 0.98},
    {"v4": 1.01},
    {"damping": 0},
    {"damping": 1.5},
    {"q_min": 0.1},
    {"q_max": -0.1},
])
def test_invalid_droop_curves(change):
    with pytest.raises(ControllerError):
        DroopParams(**change)


def test_controller_uses_the_der_limits(feeder):
    controller = DroopController(feeder, {}, (0.95, 1.05))
    np.testing.assert_allclose(controller.params.q_min, [-0.06, -0.06, -0.08])
    np.testing.assert_allclose(controller.params.q_max, [0.06, 0.06, 0.08])
    assert controller.params.damping == 0.5
    assert not controller.settles_within_period


def test_battery_overvoltage_saturates_the_battery(feeder):
    controller = DroopController(feeder, {"damping": 1.0}, (0.95, 1.05))
    q = controller.step([1.003, 1.0096, 1.0668], now=0)
    assert q[2] == pytest.approx(-0.08)
    assert q[0] == 0
    assert q[1] == 0


def test_controller_settles(feeder):
    controller = DroopController(feeder, {"mode": "instantaneous", "settle_tolerance_kvar": 0.01},
                                 (0.95, 1.05))
    assert controller.settles_within_period
    assert not controller.is_settled()
    for _ in range(20):
        controller.step([1.0, 1.0, 1.1], now=0)
    assert controller.is_settled()
    controller.reset()
    assert not controller.is_settled()
    np.testing.assert_array_equal(controller.last_q, 0)


def test_unknown_mode(feeder):
    with pytest.raises(ControllerError, match="mode"):
        DroopController(feeder, {"mode": "continuous"}, (0.95, 1.05))
