"""Local droop control.

Every DER looks at its own voltage only and follows a piecewise linear
curve with a deadband:

    reactive power
    q_max  ____
               \\
                \\___________
                 v1  v2    v3\\
                              \\____ q_min
                               v4       voltage
"""
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from control_base import ControlStrategy, ControllerError

logger = logging.getLogger(__name__)

DISCRETE = "discrete"
INSTANTANEOUS = "instantaneous"
MODES = (DISCRETE, INSTANTANEOUS)

Limit = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class DroopParams:
    """The curve. q_min and q_max may be scalars or one value per DER."""
    v1: float = 0.95
    v2: float = 0.99
    v3: float = 1.01
    v4: float = 1.05
    q_min: Limit = -1.0
    q_max: Limit = 1.0
    damping: float = 0.5

    def __post_init__(self):
        if not self.v1 < self.v2 <= self.v3 < self.v4:
            raise ControllerError(f"The breakpoints need v1 < v2 <= v3 < v4, not {self.v1}, {self.v2}, {self.v3}, {self.v4}.")
        if not 0 < self.damping <= 1:
            raise ControllerError(f"The damping must be in (0, 1], not {self.damping}.")
        if np.any(np.asarray(self.q_min) > 0) or np.any(np.asarray(self.q_max) < 0):
            raise ControllerError("The droop curve needs q_min <= 0 <= q_max.")


def droop_target(params: DroopParams, v):
    """Return the reactive power the curve asks for at the voltage v."""
    v = np.asarray(v, dtype=float)
    q_min = np.broadcast_to(params.q_min, v.shape)
    q_max = np.broadcast_to(params.q_max, v.shape)
    breakpoints = np.array([params.v1, params.v2, params.v3, params.v4])
    target = np.empty(v.shape)
    for index in np.ndindex(v.shape):
        target[index] = np.interp(v[index], breakpoints, [q_max[index], 0.0, 0.0, q_min[index]])
    return target if target.ndim else float(target)


def droop_step(params: DroopParams, v_h, prev_q_h):
    """Move the set-point by the damping fraction towards the curve."""
    prev_q_h = np.asarray(prev_q_h, dtype=float)
    q = prev_q_h + params.damping * (droop_target(params, v_h) - prev_q_h)
    q = np.clip(q, params.q_min, params.q_max)
    return q if q.ndim else float(q)


class DroopController(ControlStrategy):
    """Droop control of every DER."""

    name = "droop"

    def created(self):
        spec = self.specification
        self.params = DroopParams(
            v1=float(spec["v1"]),
            v2=float(spec["v2"]),
            v3=float(spec["v3"]),
            v4=float(spec["v4"]),
            q_min=self.box.lower,
            q_max=self.box.upper,
            damping=float(spec["damping"]),
        )
        self.mode = spec["mode"]
        if self.mode not in MODES:
            raise ControllerError(f"The droop mode must be one of {MODES}, not {self.mode!r}.")
        self.settle_tolerance = self.model.base.kw_to_pu(float(spec["settle_tolerance_kvar"]))
        self.change = np.inf

    @property
    def settles_within_period(self):
        return self.mode == INSTANTANEOUS

    def compute_setpoints(self, measured_v, now):
        q = droop_step(self.params, measured_v, self.last_q)
        self.change = float(np.max(np.abs(q - self.last_q), initial=0.0))
        return q

    def reset_state(self):
        self.change = np.inf

    def is_settled(self):
        return self.change <= self.settle_tolerance


__all__ = ["DroopParams", "DroopController", "droop_target", "droop_step", "MODES"]
