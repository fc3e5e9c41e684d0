"""The closed loop: plant, measurement noise and controller, one control period at a time.

A run is quasi-static. The grid is assumed to settle within one period,
so each period is one power flow. At the start of the period at time t
the scenario events due at t are applied, the plant is solved with the
set-points q(t) and the controller computes q(t + period) from the noisy
voltages it measures. The record of the period holds v(t), q(t) and the
multipliers after the measurement was integrated.
"""
import copy
import logging
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from scipy.stats import truncnorm

from control_base import DEFAULT_SCENARIO_PATH, ControlStrategy
from control_droop import DroopController
from control_fo import FoController, FILE_PREFIX
from control_opf import OpfDispatcher
from grid import FeederError, FeederModel, load_feeder
from optim import CostWeight, VoltageLimits, cost_weight_for, voltage_violation
from powerflow import InjectionVector, slack_balance, solve

logger = logging.getLogger(__name__)


CONTROLLER_ON = "controller_on"
CONTROLLER_OFF = "controller_off"
SET_ACTIVE_POWER = "set_active_power"
SET_LOAD = "set_load"
EVENT_KINDS = (CONTROLLER_ON, CONTROLLER_OFF, SET_ACTIVE_POWER, SET_LOAD)

STRATEGIES = {
    "fo": FoController,
    "droop": DroopController,
    "opf": OpfDispatcher,
}

CSV_FLOAT_FORMAT = "%.9g"


class ScenarioError(ValueError):
    """The scenario can not be simulated as it is written."""


class SimulationError(RuntimeError):
    """A simulation result can not be evaluated."""


def merge_specification(base: dict, override: dict) -> dict:
    """Return base updated with override, nested dictionaries are merged."""
    result = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge_specification(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def resolve_paths(specification: dict, directory: str) -> dict:
    """Make the file references of a scenario relative to its directory."""
    specification = copy.deepcopy(specification)
    feeder = specification.get("feeder")
    if isinstance(feeder, str) and not os.path.isabs(feeder):
        specification["feeder"] = os.path.join(directory, feeder)
    fo = (specification.get("controller") or {}).get("fo") or {}
    source = fo.get("x_source")
    if isinstance(source, str) and source.startswith(FILE_PREFIX):
        path = source[len(FILE_PREFIX):]
        if not os.path.isabs(path):
            fo["x_source"] = FILE_PREFIX + os.path.join(directory, path)
    return specification


def load_scenario_file(path: str) -> dict:
    """Load a scenario file in YAML or JSON."""
    try:
        with open(path, encoding="UTF-8") as file:
            data = yaml.safe_load(file)
    except OSError as error:
        raise ScenarioError(f"{path}: {error.strerror}") from error
    except yaml.YAMLError as error:
        mark = getattr(error, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ScenarioError(f"{path}{line}: {getattr(error, 'problem', error)}") from error
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: a scenario must be a mapping.")
    return resolve_paths(data, os.path.dirname(os.path.abspath(path)))


def load_default_scenario() -> dict:
    """Return the default scenario specification."""
    return load_scenario_file(DEFAULT_SCENARIO_PATH)


@dataclass(frozen=True)
class Event:
    """Something that happens at a time of the scenario.

    set_active_power sets the injection of a bus, set_load sets the
    consumption of a bus, both in kW.
    """
    time: float
    kind: str
    bus: Optional[int] = None
    value_kw: Optional[float] = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"Unknown event {self.kind!r}, choose one of {EVENT_KINDS}.")
        if self.kind in (SET_ACTIVE_POWER, SET_LOAD) and (self.bus is None or self.value_kw is None):
            raise ScenarioError(f"The event {self.kind} at {self.time}s needs a bus and a value_kw.")

    @classmethod
    def from_specification(cls, data: dict) -> "Event":
        try:
            return cls(
                time=float(data["time_s"]),
                kind=str(data["kind"]),
                bus=None if data.get("bus") is None else int(data["bus"]),
                value_kw=None if data.get("value_kw") is None else float(data["value_kw"]),
            )
        except (KeyError, TypeError, ValueError) as error:
            raise ScenarioError(f"Invalid event {data!r}: {error}") from error

    def label(self) -> str:
        if self.bus is None:
            return self.kind
        return f"{self.kind}({self.bus},{self.value_kw:g}kW)"


@dataclass(frozen=True)
class NoiseModel:
    """Zero mean Gaussian noise on the voltage measurements, cut off at truncation standard deviations."""
    stddev: float
    seed: int
    truncation: float

    def __post_init__(self):
        if self.stddev < 0:
            raise ScenarioError(f"The noise standard deviation must not be negative, not {self.stddev}.")
        if not self.truncation > 0:
            raise ScenarioError(f"The truncation must be positive, not {self.truncation}.")

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.stddev == 0:
            return np.zeros(size)
        return truncnorm.rvs(-self.truncation, self.truncation, loc=0, scale=self.stddev,
                             size=size, random_state=rng)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything a run needs.

    The values come from the merged specification, default_scenario.yml
    holds the defaults.
    """
    feeder: FeederModel
    duration: float
    control_period: float
    events: Tuple[Event, ...]
    noise: NoiseModel
    controller: dict
    v_limits: VoltageLimits
    feasibility_tolerance: float
    steady_state_window: float
    divergence_bound: float
    oscillation_tolerance: float
    solver: str
    pf_tolerance: float
    pf_max_iterations: int
    name: str

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.control_period > 0 or not self.duration >= self.control_period:
            raise ScenarioError(f"Need 0 < control_period <= duration, not {self.control_period} and {self.duration}.")
        times = [event.time for event in self.events]
        if times != sorted(times):
            raise ScenarioError("The events must be sorted by time.")
        last = self.last_period_start
        for event in self.events:
            if not 0 <= event.time <= last:
                raise ScenarioError(f"The event {event.label()} at {event.time:g}s is outside of [0, {last:g}], "
                                    f"the last control period starts at {last:g}s.")
            if event.bus is not None and (not 0 <= event.bus < len(self.feeder.buses) or event.bus == self.feeder.slack):
                raise ScenarioError(f"The event {event.label()} refers to the bus {event.bus} which can not take an injection.")
        if not self.v_limits[0] < self.v_limits[1]:
            raise ScenarioError(f"The voltage limits {self.v_limits} are empty.")
        if self.strategy not in STRATEGIES:
            raise ScenarioError(f"Unknown strategy {self.strategy!r}, choose one of {sorted(STRATEGIES)}.")

    @classmethod
    def from_specification(cls, specification: dict, feeder: Optional[FeederModel] = None) -> "Scenario":
        """Build a scenario from a merged specification."""
        spec = specification
        try:
            if feeder is None:
                feeder = load_feeder(spec["feeder"])
            if spec["slack_voltage"] is not None:
                feeder = _with_slack_voltage(feeder, spec["slack_voltage"])
            events = sorted((Event.from_specification(event) for event in spec["events"] or ()),
                            key=lambda event: event.time)
            noise = spec["noise"]
            power_flow = spec["power_flow"]
            v_min, v_max = spec["voltage_limits"]
            return cls(
                feeder=feeder,
                duration=float(spec["duration_s"]),
                control_period=float(spec["control_period_s"]),
                events=tuple(events),
                noise=NoiseModel(float(noise["stddev"]), int(noise["seed"]), float(noise["truncation"])),
                controller=copy.deepcopy(spec["controller"]),
                v_limits=(float(v_min), float(v_max)),
                feasibility_tolerance=float(spec["feasibility_tolerance"]),
                steady_state_window=float(spec["steady_state_window_s"]),
                divergence_bound=float(spec["divergence_bound"]),
                oscillation_tolerance=float(feeder.base.kw_to_pu(float(spec["oscillation_tolerance_kvar"]))),
                solver=str(power_flow["solver"]),
                pf_tolerance=float(power_flow["tolerance"]),
                pf_max_iterations=int(power_flow["max_iterations"]),
                name=str(spec["name"]),
            )
        except FeederError as error:
            raise ScenarioError(str(error)) from error
        except KeyError as error:
            raise ScenarioError(f"The scenario has no entry {error.args[0]!r}.") from error
        except (TypeError, ValueError) as error:
            if isinstance(error, ScenarioError):
                raise
            raise ScenarioError(f"Invalid scenario: {error!r}") from error

    @property
    def strategy(self) -> str:
        return self.controller["strategy"]

    @property
    def steps(self) -> int:
        return int(self.duration // self.control_period)

    @property
    def last_period_start(self) -> float:
        """Events after this time would never reach the plant."""
        return (self.steps - 1) * self.control_period

    def cost_weight(self) -> CostWeight:
        return cost_weight_for(self.feeder, self.controller["cost_weight"])


def _with_slack_voltage(feeder: FeederModel, value) -> FeederModel:
    return replace(feeder, slack_voltage=complex(value))


def canonical_scenario(strategy: str = "fo", **overrides) -> Scenario:
    """The 21 minute experiment with the given strategy.

    The keyword arguments are merged into the default specification.
    """
    spec = merge_specification(load_default_scenario(), overrides)
    spec["controller"]["strategy"] = strategy
    return Scenario.from_specification(spec)


def make_controller(scenario: Scenario) -> ControlStrategy:
    """Build the controller of the scenario."""
    block = scenario.controller
    strategy = scenario.strategy
    specification = dict(block[strategy] or {})
    specification.setdefault("cost_weight", block["cost_weight"])
    return STRATEGIES[strategy](scenario.feeder, specification, scenario.v_limits)


@dataclass(frozen=True, eq=False)
class StepRecord:
    """One control period, voltages and powers in p.u."""
    time: float
    v_true: np.ndarray
    v_measured: np.ndarray
    q: np.ndarray
    lambda_min: np.ndarray
    lambda_max: np.ndarray
    p: np.ndarray
    events: Tuple[str, ...]
    active: bool
    pf_iterations: int
    pf_residual: float
    slack_power: complex
    losses: complex


@dataclass(eq=False)
class SimulationLog:
    """The records of a run.

    failure says why a run stopped early, it is None for a complete run.
    """
    scenario: Scenario
    records: List[StepRecord] = field(default_factory=list)
    failure: Optional[str] = None
    activation_time: Optional[float] = None
    strategy: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def completed(self) -> bool:
        return self.failure is None

    @property
    def times(self) -> np.ndarray:
        return np.array([record.time for record in self.records])

    @property
    def der_voltages(self) -> np.ndarray:
        """The true voltages of the DER buses, one row per record."""
        ders = list(self.scenario.feeder.der_buses)
        return np.array([record.v_true[ders] for record in self.records]).reshape(-1, len(ders))

    @property
    def setpoints(self) -> np.ndarray:
        return np.array([record.q for record in self.records]).reshape(-1, len(self.scenario.feeder.der_buses))

    @property
    def multipliers(self) -> np.ndarray:
        m = len(self.scenario.feeder.der_buses)
        return np.array([np.concatenate([record.lambda_min, record.lambda_max])
                         for record in self.records]).reshape(-1, 2 * m)

    def to_dataframe(self) -> pd.DataFrame:
        """The records with the columns of the CSV file."""
        feeder = self.scenario.feeder
        base = feeder.base
        n = len(feeder.buses)
        m = len(feeder.der_buses)
        columns = {"time_s": self.times}
        v_true = np.array([record.v_true for record in self.records]).reshape(-1, n)
        for i in range(n):
            columns[f"v_true_bus{i}"] = v_true[:, i]
        v_measured = np.array([record.v_measured for record in self.records]).reshape(-1, m)
        for j in range(m):
            columns[f"v_meas_der{j}"] = v_measured[:, j]
        q = base.pu_to_kw(self.setpoints)
        for j in range(m):
            columns[f"q_cmd_der{j}"] = q[:, j]
        duals = self.multipliers
        for j in range(m):
            columns[f"lambda_min_{j}"] = duals[:, j]
        for j in range(m):
            columns[f"lambda_max_{j}"] = duals[:, m + j]
        p = base.pu_to_kw(np.array([record.p for record in self.records]).reshape(-1, n))
        for i in range(n):
            columns[f"p_bus{i}_kw"] = p[:, i]
        columns["event"] = [";".join(record.events) for record in self.records]
        columns["pf_iters"] = [record.pf_iterations for record in self.records]
        columns["pf_residual"] = [record.pf_residual for record in self.records]
        return pd.DataFrame(columns)

    def to_csv(self, path_or_buffer=None):
        """Write the records with 9 significant digits."""
        return self.to_dataframe().to_csv(path_or_buffer, index=False, float_format=CSV_FLOAT_FORMAT)


def _apply(event: Event, inj: InjectionVector, base) -> InjectionVector:
    if event.kind == SET_ACTIVE_POWER:
        return inj.with_active_power(event.bus, float(base.kw_to_pu(event.value_kw)))
    if event.kind == SET_LOAD:
        return inj.with_active_power(event.bus, -float(base.kw_to_pu(event.value_kw)))
    return inj


def injections_at(scenario: Scenario, time: Optional[float] = None) -> InjectionVector:
    """Return the exogenous injections after the events up to time.

    The default is the last control period, the injections the run ends with.
    """
    time = scenario.last_period_start if time is None else time
    inj = InjectionVector.from_model(scenario.feeder)
    for event in scenario.events:
        if event.time <= time:
            inj = _apply(event, inj, scenario.feeder.base)
    return inj


def _duals(controller: ControlStrategy, m: int):
    duals = controller.duals
    if duals is None:
        return np.full(m, np.nan), np.full(m, np.nan)
    return duals


MAXIMUM_SETTLE_ITERATIONS = 100


def run(scenario: Scenario, controller: Optional[ControlStrategy] = None) -> SimulationLog:
    """Simulate the scenario.

    A failing power flow ends the run, the log keeps the records so far
    and names the failure.
    """
    feeder = scenario.feeder
    if controller is None:
        controller = make_controller(scenario)
    log = SimulationLog(scenario, strategy=controller.name)
    m = len(feeder.der_buses)
    ders = list(feeder.der_buses)
    rng = scenario.noise.generator()
    inj = InjectionVector.from_model(feeder)
    q = np.zeros(m)
    active = False
    pending = list(scenario.events)

    def plant(setpoints):
        return solve(feeder, inj.with_setpoints(setpoints), scenario.solver,
                     scenario.pf_tolerance, scenario.pf_max_iterations)

    for step in range(scenario.steps):
        time = step * scenario.control_period
        labels = []
        while pending and pending[0].time <= time:
            event = pending.pop(0)
            labels.append(event.label())
            logger.info("t=%gs %s", time, event.label())
            if event.kind == CONTROLLER_ON:
                if not active:
                    controller.reset()
                active = True
                if log.activation_time is None:
                    log.activation_time = time
            elif event.kind == CONTROLLER_OFF:
                active = False
                controller.reset()
                q = np.zeros(m)
            else:
                inj = _apply(event, inj, feeder.base)
        op = plant(q)
        if not op.converged:
            log.failure = f"power flow failed at t={time:g}s: {op.message}"
            logger.error("%s", log.failure)
            break
        v_true = np.abs(op.v)
        v_measured = v_true[ders] + scenario.noise.sample(rng, m)
        q_next = q
        if active:
            controller.observe_injections(inj)
            q_next = controller.step(v_measured, time)
            if controller.settles_within_period:
                for _ in range(MAXIMUM_SETTLE_ITERATIONS):
                    if controller.is_settled():
                        break
                    inner = plant(q_next)
                    if not inner.converged:
                        break
                    inner_v = np.abs(inner.v[ders]) + scenario.noise.sample(rng, m)
                    q_next = controller.step(inner_v, time)
                else:
                    logger.warning("t=%gs the %s controller did not settle", time, controller.name)
        lambda_min, lambda_max = _duals(controller, m)
        p = inj.p.copy()
        p[feeder.slack] = op.s[feeder.slack].real
        slack_power, losses = slack_balance(feeder, op)
        log.records.append(StepRecord(
            time=time, v_true=v_true, v_measured=v_measured, q=q,
            lambda_min=np.array(lambda_min), lambda_max=np.array(lambda_max), p=p,
            events=tuple(labels), active=active, pf_iterations=op.iterations,
            pf_residual=op.residual, slack_power=slack_power, losses=losses,
        ))
        q = np.array(q_next, dtype=float)
    return log


@dataclass(frozen=True)
class ViolationMetrics:
    """Voltage performance of a run, computed on the true voltages.

    Everything is counted from the activation of the controller on.
    time_to_feasibility is None if the voltages never became feasible.
    The steady state is the final window of the run.
    """
    max_violation: float
    violation_integral: float
    time_to_feasibility: Optional[float]
    steady_state_cost: float
    steady_state_violation: float
    steady_state_voltages: Tuple[float, ...]
    activation_time: float

    def as_row(self) -> dict:
        row = {
            "max_violation": self.max_violation,
            "violation_integral": self.violation_integral,
            "time_to_feasibility": "never" if self.time_to_feasibility is None else self.time_to_feasibility,
            "steady_state_cost": self.steady_state_cost,
            "steady_state_violation": self.steady_state_violation,
        }
        for index, voltage in enumerate(self.steady_state_voltages):
            row[f"steady_state_v_der{index}"] = voltage
        return row


def violation_metrics(log: SimulationLog, limits: Optional[VoltageLimits] = None,
                      M: Optional[CostWeight] = None) -> ViolationMetrics:
    """Measure how well the voltages were kept within the limits."""
    if not log.records:
        raise SimulationError("The simulation log is empty.")
    scenario = log.scenario
    limits = scenario.v_limits if limits is None else limits
    M = scenario.cost_weight() if M is None else M
    start = 0.0 if log.activation_time is None else log.activation_time
    times = log.times
    after = times >= start
    if not after.any():
        raise SimulationError(f"The log ends before the controller was activated at {start}s.")
    violation = voltage_violation(log.der_voltages, limits).max(axis=1)
    feasible = np.flatnonzero(after & (violation <= scenario.feasibility_tolerance))
    window = steady_state_window(log)
    q = log.setpoints
    return ViolationMetrics(
        max_violation=float(violation[after].max()),
        violation_integral=float(violation[after].sum() * scenario.control_period),
        time_to_feasibility=float(times[feasible[0]] - start) if feasible.size else None,
        steady_state_cost=float(np.mean(M.costs(q[window]))),
        steady_state_violation=float(violation[window].max()),
        steady_state_voltages=tuple(float(v) for v in log.der_voltages[window].mean(axis=0)),
        activation_time=start,
    )


def steady_state_window(log: SimulationLog) -> np.ndarray:
    """Select the records of the final window of the run."""
    times = log.times
    return times >= times[-1] + log.scenario.control_period - log.scenario.steady_state_window


def sustained_oscillation(series, tolerance: float) -> bool:
    """Whether a trajectory, one row per step, still moves both up and down by more than tolerance."""
    steps = np.diff(np.asarray(series, dtype=float), axis=0)
    if not steps.size:
        return False
    rising = np.any(steps > tolerance, axis=0)
    falling = np.any(steps < -tolerance, axis=0)
    return bool(np.any(rising & falling))


def divergence_detected(log: SimulationLog, bound: Optional[float] = None) -> bool:
    """Whether the loop ran away instead of settling.

    A run diverges when a multiplier exceeds the bound, or when the final
    window still violates the limits while a set-point keeps swinging by
    more than the oscillation tolerance. A loop that is saturated in
    violation is stuck, not divergent.
    """
    scenario = log.scenario
    bound = scenario.divergence_bound if bound is None else bound
    if not log.records:
        return False
    duals = np.nan_to_num(log.multipliers)
    if np.any(np.abs(duals) > bound):
        return True
    window = steady_state_window(log)
    violation = voltage_violation(log.der_voltages[window], scenario.v_limits).max(initial=0.0)
    if violation <= scenario.feasibility_tolerance:
        return False
    return sustained_oscillation(log.setpoints[window], scenario.oscillation_tolerance)


def detriment_intervals(log: SimulationLog) -> List[Tuple[float, float]]:
    """Return the intervals in which a PV injects while a battery is in overvoltage.

    An interval is (first time, last time + period) of consecutive records.
    """
    feeder = log.scenario.feeder
    kinds = [der.kind for der in feeder.ders]
    pvs = [index for index, kind in enumerate(kinds) if kind == "pv"]
    batteries = [index for index, kind in enumerate(kinds) if kind == "battery"]
    if not log.records or not pvs or not batteries:
        return []
    v_max = log.scenario.v_limits[1]
    q = log.setpoints
    v = log.der_voltages
    detrimental = np.any(q[:, pvs] > 0, axis=1) & np.any(v[:, batteries] > v_max, axis=1)
    intervals = []
    times = log.times
    start = None
    for time, flag in zip(times, detrimental):
        if flag and start is None:
            start = time
        elif not flag and start is not None:
            intervals.append((float(start), float(time)))
            start = None
    if start is not None:
        intervals.append((float(start), float(times[-1] + log.scenario.control_period)))
    return intervals


def droop_detriment_probe(scenario: Scenario):
    """Run the scenario and tell whether droop control worked against the battery.

    Only droop control is probed, other strategies return False.
    """
    log = run(scenario)
    if scenario.strategy != "droop":
        return False, log
    intervals = detriment_intervals(log)
    for start, end in intervals:
        logger.info("a PV injects reactive power while the battery is in overvoltage from %gs to %gs", start, end)
    return bool(intervals), log


__all__ = [
    "Scenario", "Event", "NoiseModel", "SimulationLog", "StepRecord", "ViolationMetrics",
    "ScenarioError", "SimulationError", "run", "violation_metrics", "divergence_detected",
    "detriment_intervals", "droop_detriment_probe", "canonical_scenario", "make_controller",
    "steady_state_window", "sustained_oscillation",
    "merge_specification", "load_scenario_file", "load_default_scenario", "injections_at", "STRATEGIES",
]
