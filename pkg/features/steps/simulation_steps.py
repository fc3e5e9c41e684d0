import json
import os

import numpy as np
from behave import given, then, when
from click.testing import CliRunner

from app import cli, get_scenario_specification
from experiments import Sweep
from optim import BoxConstraint, opf_solve
from sim import (
    Scenario, droop_detriment_probe, injections_at, run, violation_metrics,
)


def der_index(context, name):
    feeder = scenario_of(context).feeder
    names = [der.name for der in feeder.ders]
    assert name in names, f"There is no DER {name!r}, only {names}."
    return names.index(name)


def scenario_of(context):
    if context.log is not None:
        return context.log.scenario
    return Scenario.from_specification(get_scenario_specification(overrides=context.specification))


def set_parameter(specification, path, value):
    *parents, name = path.split(".")
    for parent in parents:
        specification = specification.setdefault(parent, {})
    specification[name] = value


@given('we use the "{strategy}" strategy')
def step_impl(context, strategy):
    set_parameter(context.specification, "controller.strategy", strategy)


@given('we set the "{parameter_name}" parameter to {parameter_value}')
def step_impl(context, parameter_name, parameter_value):
    set_parameter(context.specification, parameter_name, json.loads(parameter_value))


@when('we run the scenario')
def step_impl(context):
    context.log = run(scenario_of(context))
    assert context.log.completed, context.log.failure
    context.metrics = violation_metrics(context.log)


@when('we probe the droop control for detriment')
def step_impl(context):
    context.detriment, context.log = droop_detriment_probe(scenario_of(context))


@when('we sweep "{parameter}" over {values}')
def step_impl(context, parameter, values):
    values = [float(value) for value in values.split(",")]
    context.suite = Sweep(get_scenario_specification(overrides=context.specification), parameter, values)
    context.table = context.suite.run_all()


@when('we call the command line with "{arguments}"')
def step_impl(context, arguments):
    context.result = CliRunner().invoke(cli, arguments.split() + ["--out", context.output])


@then('all DER voltages are within the limits {seconds:d} seconds after the activation')
def step_impl(context, seconds):
    ttf = context.metrics.time_to_feasibility
    assert ttf is not None, "The voltages never became feasible."
    assert ttf <= seconds, f"Feasible only {ttf}s after the activation."


@then('the steady state voltage of the "{name}" is {voltage:g} ± {tolerance:g}')
def step_impl(context, name, voltage, tolerance):
    actual = context.metrics.steady_state_voltages[der_index(context, name)]
    assert abs(actual - voltage) <= tolerance, f"Expected {voltage} ± {tolerance} but got {actual}."


@then('the reactive power of the "{name}" returns to zero between {start:d} and {end:d} seconds')
def step_impl(context, name, start, end):
    log = context.log
    index = der_index(context, name)
    window = (log.times >= start) & (log.times < end)
    q = log.setpoints[window, index]
    assert q[-1] == 0, f"The reactive power is still {q[-1]} at {end}s."
    violation = np.maximum(0, log.der_voltages[window] - log.scenario.v_limits[1]).max()
    assert violation <= log.scenario.feasibility_tolerance, f"The voltages violate the limit by {violation}."


@then('the voltages are feasible again before {seconds:d} seconds')
def step_impl(context, seconds):
    log = context.log
    v_min, v_max = log.scenario.v_limits
    tolerance = log.scenario.feasibility_tolerance
    feasible = np.all((log.der_voltages >= v_min - tolerance) & (log.der_voltages <= v_max + tolerance), axis=1)
    assert feasible[log.times < seconds][-1], f"The voltages are not feasible at {seconds}s."


@then('the reactive power of the "{name}" reaches {kvar:g} kVAr')
def step_impl(context, name, kvar):
    log = context.log
    q = log.scenario.feeder.base.pu_to_kw(log.setpoints[:, der_index(context, name)])
    assert np.any(np.abs(q - kvar) <= 0.01), f"The reactive power never reaches {kvar} kVAr, it is within [{q.min()}, {q.max()}]."


@then('the voltage of the "{name}" stays above {voltage:g} while bus {bus:d} injects {kw:g} kW')
def step_impl(context, name, voltage, bus, kw):
    log = context.log
    p = np.array([record.p[bus] for record in log.records])
    injecting = np.isclose(log.scenario.feeder.base.pu_to_kw(p), kw)
    assert injecting.any(), f"Bus {bus} never injects {kw} kW."
    v = log.der_voltages[injecting, der_index(context, name)]
    assert np.all(v > voltage), f"The voltage drops to {v.min()}."


@then('the steady state violation is at most {limit:g}')
def step_impl(context, limit):
    assert context.metrics.steady_state_violation <= limit, context.metrics


@then('the steady state violation is more than {limit:g}')
def step_impl(context, limit):
    assert context.metrics.steady_state_violation > limit, context.metrics


@then('the steady state cost is within {percent:d}% of the optimum')
def step_impl(context, percent):
    scenario = context.log.scenario
    feeder = scenario.feeder
    optimum = opf_solve(feeder, injections_at(scenario), scenario.v_limits,
                        BoxConstraint.from_model(feeder), scenario.cost_weight())
    assert optimum.feasible, optimum.message
    ratio = context.metrics.steady_state_cost / optimum.cost
    print(f"cost ratio {ratio:.4f}")
    assert ratio <= 1 + percent / 100, f"The cost is {ratio:.4f} times the optimum."


@then('the detriment is flagged')
def step_impl(context):
    assert context.detriment, "No PV injected reactive power while the battery was in overvoltage."


@then('the run "{key}" becomes feasible')
def step_impl(context, key):
    row = context.table.set_index("run").loc[key]
    assert row["time_to_feasibility"] != "never", row


@then('the run "{key}" is divergent')
def step_impl(context, key):
    assert context.table.set_index("run").loc[key, "divergent"]


@then('the run "{key}" is not divergent')
def step_impl(context, key):
    assert not context.table.set_index("run").loc[key, "divergent"]


@then('the command line exits with {code:d}')
def step_impl(context, code):
    assert context.result.exit_code == code, context.result.output


@then('the file "{name}" is written')
def step_impl(context, name):
    assert os.path.isfile(os.path.join(context.output, name)), f"{name} is missing."
