"""Feedback optimization by dual ascent.

The controller integrates the voltage violations it measures into
multipliers and maps them to set-points through the sensitivity X of the
voltages to the reactive powers. No model of the loads is needed.

For constraints A y + b <= 0 on the measured output y = X u + const and
the cost 1/2 u'Mu, one step is

    lambda <- max(0, lambda + alpha (A y + b))
    u      <- argmin over the box of |u - u_unc|_M,  u_unc = -M^-1 X' A' lambda

Volt/VAr control uses A = [-I; I] and b = [v_min; -v_max], which gives
the two multipliers lambda_min and lambda_max per DER.
"""
import logging
from dataclasses import dataclass

import numpy as np
import yaml

from control_base import ControlStrategy, ControllerError
from grid import FeederModel, reduced_reactance
from optim import BoxConstraint, CostWeight, cost_weight_for, project_weighted_box

logger = logging.getLogger(__name__)

X_SOURCES = ("computed", "published", "ones", "file:PATH")
PUBLISHED = ("published", "paper")
FILE_PREFIX = "file:"


def dual_ascent_update(duals, y, A, b, alpha: float, frozen=None) -> np.ndarray:
    """Return max(0, duals + alpha (A y + b)).

    Entries in the frozen mask keep their value.
    """
    duals = np.asarray(duals, dtype=float)
    updated = np.maximum(0.0, duals + alpha * (A @ np.asarray(y, dtype=float) + b))
    if frozen is not None:
        updated = np.where(frozen, duals, updated)
    return updated


def unconstrained_critical_point(duals, M: CostWeight, X, A) -> np.ndarray:
    """Return the minimizer of the Lagrangian without the box, -M^-1 X' A' duals."""
    return -M.solve(np.asarray(X, dtype=float).T @ (A.T @ np.asarray(duals, dtype=float)))


def voltage_constraints(v_min: float, v_max: float, m: int):
    """Return A and b of v_min <= v <= v_max for m voltages."""
    identity = np.eye(m)
    A = np.vstack([-identity, identity])
    b = np.concatenate([np.full(m, float(v_min)), np.full(m, -float(v_max))])
    return A, b


@dataclass
class FoControllerState:
    """The state of the controller, all quantities in p.u."""
    lambda_min: np.ndarray
    lambda_max: np.ndarray
    alpha: float
    X: np.ndarray
    M: CostWeight
    v_min: float
    v_max: float
    box: BoxConstraint
    last_q: np.ndarray
    anti_windup_enabled: bool = True

    def __post_init__(self):
        m = self.box.dimension
        self.X = np.asarray(self.X, dtype=float)
        if self.X.shape != (m, m) or self.M.dimension != m:
            raise ControllerError(f"X is {self.X.shape} and M is {self.M.dimension}x{self.M.dimension}, but there are {m} DERs.")
        if not self.alpha > 0:
            raise ControllerError(f"The gain alpha must be positive, not {self.alpha}.")
        if not self.v_min < self.v_max:
            raise ControllerError(f"v_min={self.v_min} must be below v_max={self.v_max}.")

    @classmethod
    def initial(cls, X, M: CostWeight, box: BoxConstraint, alpha: float,
                v_min: float, v_max: float, anti_windup_enabled: bool = True) -> "FoControllerState":
        """Zero multipliers and zero set-points."""
        m = box.dimension
        return cls(np.zeros(m), np.zeros(m), alpha, X, M, v_min, v_max, box,
                   box.clip(np.zeros(m)), anti_windup_enabled)

    @property
    def dimension(self) -> int:
        return self.box.dimension

    @property
    def duals(self) -> np.ndarray:
        return np.concatenate([self.lambda_min, self.lambda_max])

    def saturation(self):
        """Return whether all set-points sit at their lower and at their upper bound."""
        return bool(np.all(self.last_q == self.box.lower)), bool(np.all(self.last_q == self.box.upper))


def fo_update_duals(state: FoControllerState, v):
    """Integrate the voltage violations into the multipliers of the state.

    With anti-windup, a violated overvoltage entry is not integrated while
    every DER is at its lower bound, and a violated undervoltage entry is
    not integrated while every DER is at its upper bound.
    """
    v = np.asarray(v, dtype=float)
    m = state.dimension
    if v.shape != (m,):
        raise ControllerError(f"Expected {m} voltages, got shape {v.shape}.")
    A, b = voltage_constraints(state.v_min, state.v_max, m)
    frozen = None
    if state.anti_windup_enabled:
        all_at_lower, all_at_upper = state.saturation()
        undervoltage = v < state.v_min
        overvoltage = v > state.v_max
        frozen = np.concatenate([undervoltage & all_at_upper, overvoltage & all_at_lower])
        if frozen.any():
            logger.debug("anti-windup holds the multipliers %s", np.flatnonzero(frozen))
    duals = dual_ascent_update(state.duals, v, A, b, state.alpha, frozen)
    state.lambda_min, state.lambda_max = duals[:m], duals[m:]
    return state.lambda_min, state.lambda_max


def fo_unconstrained_setpoint(state: FoControllerState) -> np.ndarray:
    """Return M^-1 X' (lambda_min - lambda_max)."""
    A, _ = voltage_constraints(state.v_min, state.v_max, state.dimension)
    return unconstrained_critical_point(state.duals, state.M, state.X, A)


def fo_step(state: FoControllerState, v) -> np.ndarray:
    """Measure, integrate, minimize and project."""
    fo_update_duals(state, v)
    q = project_weighted_box(fo_unconstrained_setpoint(state), state.box, state.M)
    state.last_q = q
    return q


def _load_matrix(path: str) -> np.ndarray:
    try:
        with open(path, encoding="UTF-8") as file:
            data = yaml.safe_load(file)
    except OSError as error:
        raise ControllerError(f"{path}: {error.strerror}") from error
    except yaml.YAMLError as error:
        raise ControllerError(f"{path}: {error}") from error
    if isinstance(data, dict):
        data = data.get("X")
    try:
        return np.array(data, dtype=float)
    except (TypeError, ValueError) as error:
        raise ControllerError(f"{path} does not contain a matrix.") from error


def sensitivity_matrix(model: FeederModel, source: str = "computed", perturbation: float = 0.0) -> np.ndarray:
    """Return the sensitivity X used by the controller.

    source is one of
    - computed: the reduced reactance matrix of the feeder
    - published (or paper): the matrix published with the feeder file
    - ones: all entries one, no knowledge of the grid
    - file:PATH: a matrix in a YAML or JSON file, a list of rows or a
      mapping with the key X

    The result is scaled by 1 + perturbation.
    """
    m = len(model.der_buses)
    if source == "computed":
        X = np.array(reduced_reactance(model))
    elif source in PUBLISHED:
        if model.published_reactance is None:
            raise ControllerError("The feeder file has no published_reactance.")
        X = np.array(model.published_reactance, dtype=float)
    elif source == "ones":
        X = np.ones((m, m))
    elif source.startswith(FILE_PREFIX):
        X = _load_matrix(source[len(FILE_PREFIX):])
    else:
        raise ControllerError(f"Unknown X source {source!r}, choose one of {', '.join(X_SOURCES)}.")
    if X.shape != (m, m):
        raise ControllerError(f"X from {source!r} has the shape {X.shape}, the feeder has {m} DERs.")
    if not np.all(np.isfinite(X)):
        raise ControllerError(f"X from {source!r} is not finite.")
    return X * (1 + float(perturbation))


class FoController(ControlStrategy):
    """Dual ascent on the measured DER voltages."""

    name = "fo"

    def created(self):
        spec = self.specification
        self.M = cost_weight_for(self.model, spec["cost_weight"])
        self.X = sensitivity_matrix(self.model, spec["x_source"],
                                    spec["x_perturbation"])
        self.alpha = float(spec["alpha"])
        self.anti_windup_enabled = bool(spec["anti_windup"])
        self.reset_state()

    def reset_state(self):
        self.state = FoControllerState.initial(
            self.X, self.M, self.box, self.alpha, *self.v_limits,
            anti_windup_enabled=self.anti_windup_enabled)

    def compute_setpoints(self, measured_v, now):
        return fo_step(self.state, measured_v)

    @property
    def duals(self):
        return self.state.lambda_min.copy(), self.state.lambda_max.copy()


__all__ = [
    "FoControllerState", "FoController", "fo_update_duals", "fo_unconstrained_setpoint",
    "fo_step", "dual_ascent_update", "unconstrained_critical_point", "voltage_constraints",
    "sensitivity_matrix", "X_SOURCES",
]
