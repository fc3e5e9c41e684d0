"""
Test the centralized OPF dispatch.
"""
import numpy as np
import pytest

import control_opf
from control_base import ControllerError
from control_opf import OpfDispatcher, opf_dispatch_step, perturbed_model
from grid import reduced_reactance
from optim import BoxConstraint, cost_weight_for, opf_solve
from powerflow import InjectionVector, solve_newton

LIMITS = (0.95, 1.05)


@pytest.fixture()
def injections(feeder):
    return InjectionVector.from_model(feeder)


def dispatch(feeder, injections, specification=None):
    controller = OpfDispatcher(feeder, specification or {}, LIMITS)
    controller.observe_injections(injections)
    return controller, controller.step(np.ones(3), now=180)


def true_der_voltages(feeder, injections, q):
    return np.abs(solve_newton(feeder, injections.with_setpoints(q)).v[list(feeder.der_buses)])


def test_perfect_model_dispatch_is_feasible(feeder, injections):
    controller, q = dispatch(feeder, injections)
    assert not controller.infeasible
    M = cost_weight_for(feeder, "inverse-limits")
    expected = opf_solve(feeder, injections, LIMITS, BoxConstraint.from_model(feeder), M)
    np.testing.assert_allclose(q, expected.q)
    assert true_der_voltages(feeder, injections, q).max() <= 1.05 + 2e-3


def test_dispatch_ignores_the_measurements(feeder, injections):
    _, q = dispatch(feeder, injections)
    controller = OpfDispatcher(feeder, {}, LIMITS)
    controller.observe_injections(injections)
    np.testing.assert_allclose(controller.step([0.9, 1.2, 1.0], now=180), q)


def test_underestimated_impedances_leave_a_violation(feeder, injections):
    controller, q = dispatch(feeder, injections, {"impedance_scale": 0.8})
    assert not controller.infeasible
    np.testing.assert_allclose(reduced_reactance(controller.dispatch_model), 0.8 * reduced_reactance(feeder))
    assert true_der_voltages(feeder, injections, q)[2] > 1.05 + 2e-3


def test_missing_load_makes_the_model_infeasible(feeder, injections):
    controller, q = dispatch(feeder, injections, {"missing_loads": [1]})
    predicted = true_der_voltages(feeder, injections.without_buses([1]), np.zeros(3))
    assert predicted[2] > true_der_voltages(feeder, injections, np.zeros(3))[2]
    assert controller.infeasible
    assert controller.infeasible_count == 1
    np.testing.assert_array_equal(q, 0)


def test_an_infeasible_dispatch_holds_the_previous_setpoints(feeder, injections):
    box = BoxConstraint.from_model(feeder)
    M = cost_weight_for(feeder, "inverse-limits")
    known = injections.without_buses([1])
    previous = np.array([-0.01, -0.02, -0.03])
    q, feasible = opf_dispatch_step(feeder, known, LIMITS, box, M, previous)
    assert not feasible
    np.testing.assert_array_equal(q, previous)
    assert q is not previous


def test_unchanged_injections_reuse_the_dispatch(feeder, injections, monkeypatch):
    calls = []

    def counting(*args, **kw):
        calls.append(args)
        return opf_solve(*args, **kw)

    monkeypatch.setattr(control_opf, "opf_solve", counting)
    controller, first = dispatch(feeder, injections)
    second = controller.step(np.ones(3), now=190)
    np.testing.assert_array_equal(first, second)
    assert len(calls) == 1
    controller.observe_injections(injections.with_active_power(3, 0.05))
    controller.step(np.ones(3), now=200)
    assert len(calls) == 2


def test_dispatch_needs_the_injections(feeder):
    controller = OpfDispatcher(feeder, {}, LIMITS)
    with pytest.raises(ControllerError, match="injections"):
        controller.step(np.ones(3), now=0)


@pytest.mark.parametrize("buses", [[0], [4], [-1]])
def test_missing_loads_must_be_buses(feeder, buses):
    with pytest.raises(ControllerError):
        OpfDispatcher(feeder, {"missing_loads": buses}, LIMITS)


@pytest.mark.parametrize("scale", [0, -0.5])
def test_impedance_scale_must_be_positive(feeder, scale):
    with pytest.raises(ControllerError):
        perturbed_model(feeder, scale)


def test_the_exact_model_is_not_copied(feeder):
    assert perturbed_model(feeder, 1.0) is feeder


def test_reset_forgets_the_cache(feeder, injections):
    controller, _ = dispatch(feeder, injections, {"missing_loads": [1]})
    controller.reset()
    assert controller.cached_key is None
    assert not controller.infeasible
    assert controller.infeasible_count == 0
