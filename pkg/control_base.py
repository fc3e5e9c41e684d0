"""The interface shared by the Volt/VAr controllers."""
import copy
import logging
import os
from functools import lru_cache

import numpy as np
import yaml

from grid import FeederModel
from optim import BoxConstraint, VoltageLimits

logger = logging.getLogger(__name__)

HERE = os.path.dirname(__file__) or "."
DEFAULT_SCENARIO_PATH = os.path.join(HERE, "default_scenario.yml")


class ControllerError(ValueError):
    """A controller was configured or called with inconsistent input."""


@lru_cache(maxsize=1)
def _default_controller_block() -> dict:
    with open(DEFAULT_SCENARIO_PATH, encoding="UTF-8") as file:
        return yaml.safe_load(file)["controller"]


def default_settings(name: str) -> dict:
    """Return the settings of a controller in the default scenario."""
    block = _default_controller_block()
    settings = copy.deepcopy(block.get(name) or {})
    settings.setdefault("cost_weight", copy.deepcopy(block["cost_weight"]))
    return settings


class ControlStrategy:
    """Base class for controllers.

    Once per control period the simulation calls step() with the measured
    voltage magnitudes of the DERs and applies the returned reactive power
    set-points, in p.u. and in the order of FeederModel.der_buses.
    """

    name = ""

    # the simulation iterates step() inside one period until is_settled()
    settles_within_period = False

    def __init__(self, model: FeederModel, specification: dict, v_limits: VoltageLimits):
        self.model = model
        self.specification = {**default_settings(self.name), **specification}
        self.v_limits = v_limits
        self.box = BoxConstraint.from_model(model)
        if not v_limits[0] < v_limits[1]:
            raise ControllerError(f"v_min={v_limits[0]} must be below v_max={v_limits[1]}.")
        self.last_q = np.zeros(self.box.dimension)
        self.created()

    @property
    def dimension(self) -> int:
        return self.box.dimension

    def created(self):
        """Template method for subclasses."""

    def observe_injections(self, inj):
        """Receive the exogenous injections of the feeder.

        Only a centralized dispatch uses them, the feedback controllers
        see nothing but their measurements.
        """

    def step(self, measured_v, now: float) -> np.ndarray:
        """Return the set-points for the next control period."""
        measured_v = np.asarray(measured_v, dtype=float)
        if measured_v.shape != (self.dimension,):
            raise ControllerError(f"Expected {self.dimension} voltage measurements, got shape {measured_v.shape}.")
        q = np.asarray(self.compute_setpoints(measured_v, now), dtype=float)
        if not self.box.contains(q):
            raise ControllerError(f"{self.name} emitted {q} outside of the box [{self.box.lower}, {self.box.upper}].")
        self.last_q = q
        return q

    def compute_setpoints(self, measured_v: np.ndarray, now: float) -> np.ndarray:
        raise NotImplementedError("to be implemented in subclasses")

    def reset(self):
        """Forget the history, the set-points return to zero."""
        self.last_q = np.zeros(self.dimension)
        self.reset_state()

    def reset_state(self):
        """Template method for subclasses."""

    def is_settled(self) -> bool:
        return True

    @property
    def duals(self):
        """The multipliers (lambda_min, lambda_max) or None if there are none."""
        return None

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.name}>"


__all__ = ["ControlStrategy", "ControllerError", "default_settings", "DEFAULT_SCENARIO_PATH"]
