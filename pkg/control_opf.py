"""Centralized dispatch from an optimal power flow.

The dispatcher is told every injection of the feeder and computes the
set-points on its own model of the grid. The set-points are applied
without looking at the voltages, so any error of the model shows up in
the grid.
"""
import logging
from typing import Iterable, Optional, Tuple

import numpy as np

from control_base import ControlStrategy, ControllerError
from grid import FeederError, FeederModel, scale_impedances
from optim import BoxConstraint, CostWeight, VoltageLimits, cost_weight_for, opf_solve
from powerflow import InjectionVector

logger = logging.getLogger(__name__)


def opf_dispatch_step(model: FeederModel, w_known: InjectionVector, limits: VoltageLimits,
                      box: BoxConstraint, M: CostWeight, previous_q=None,
                      solver: str = "newton") -> Tuple[np.ndarray, bool]:
    """Return the set-points and whether the OPF was feasible.

    If the OPF of the model has no solution, the previous set-points are
    held.
    """
    result = opf_solve(model, w_known, limits, box, M, solver=solver)
    if result.feasible:
        return result.q, True
    if previous_q is None:
        previous_q = np.zeros(box.dimension)
    logger.warning("opf dispatch holds the previous set-points: %s", result.message)
    return np.array(previous_q, dtype=float), False


def perturbed_model(model: FeederModel, impedance_scale: float = 1.0) -> FeederModel:
    """Return the dispatcher's view of the grid."""
    if impedance_scale == 1:
        return model
    try:
        return scale_impedances(model, impedance_scale)
    except FeederError as error:
        raise ControllerError(str(error)) from error


class OpfDispatcher(ControlStrategy):
    """Solve the OPF whenever the known injections change."""

    name = "opf"

    def created(self):
        spec = self.specification
        self.impedance_scale = float(spec["impedance_scale"])
        self.dispatch_model = perturbed_model(self.model, self.impedance_scale)
        self.missing_loads = self._bus_ids(spec["missing_loads"] or [])
        self.solver = spec["solver"]
        self.M = cost_weight_for(self.model, spec["cost_weight"])
        self.injections: Optional[InjectionVector] = None
        self.reset_state()

    def _bus_ids(self, buses: Iterable) -> Tuple[int, ...]:
        ids = tuple(int(bus) for bus in buses)
        for bus in ids:
            if not 0 <= bus < len(self.model.buses) or bus == self.model.slack:
                raise ControllerError(f"The missing load {bus} is not a bus of the feeder.")
        return ids

    def reset_state(self):
        self.cached_key = None
        self.cached_q = None
        self.infeasible = False
        self.infeasible_count = 0

    def observe_injections(self, inj):
        self.injections = inj

    def compute_setpoints(self, measured_v, now):
        if self.injections is None:
            raise ControllerError("The OPF dispatch needs the injections of the feeder.")
        known = self.injections.without_buses(self.missing_loads)
        key = known.key()
        if key == self.cached_key:
            return self.cached_q
        logger.info("opf dispatch at t=%gs", now)
        q, feasible = opf_dispatch_step(self.dispatch_model, known, self.v_limits, self.box,
                                        self.M, self.last_q, solver=self.solver)
        self.infeasible = not feasible
        if feasible:
            self.cached_key, self.cached_q = key, q
        else:
            self.infeasible_count += 1
        return q


__all__ = ["OpfDispatcher", "opf_dispatch_step", "perturbed_model"]
