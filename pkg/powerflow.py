"""The plant: AC power flow of a feeder.

Two solvers share one convergence contract. solve_newton() is the polar
Newton-Raphson method, solve_zbus() is the fixed point iteration

    v <- v_0 + Z conj(s / v)

on the network reduced by the slack bus. Both start flat and report a
failed solve as a GridOperatingPoint with converged == False instead of
raising.
"""
import logging
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

from grid import FeederModel, bus_admittance

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 50
# an iterate above this magnitude has left every physical solution
DIVERGENCE_BOUND = 10.0


class PowerFlowError(RuntimeError):
    """A power flow result was used although it is not valid."""


@dataclass(frozen=True, eq=False)
class InjectionVector:
    """Power injections in p.u., indexed by bus.

    p and q are the exogenous injections w of every bus, the entry of the
    slack bus is ignored. u holds the reactive set-points of the
    controllable DERs in the order of FeederModel.der_buses.
    """
    p: np.ndarray
    q: np.ndarray
    u: np.ndarray

    @classmethod
    def from_model(cls, model: FeederModel, u=None) -> "InjectionVector":
        """The nominal injections of the feeder file."""
        p = model.base.power_to_pu([bus.p for bus in model.buses])
        q = model.base.power_to_pu([bus.q for bus in model.buses])
        if u is None:
            u = np.zeros(len(model.der_buses))
        return cls(p, q, np.asarray(u, dtype=float))

    def with_setpoints(self, u) -> "InjectionVector":
        return replace(self, u=np.asarray(u, dtype=float))

    def with_active_power(self, bus: int, p_pu: float) -> "InjectionVector":
        p = self.p.copy()
        p[bus] = p_pu
        return replace(self, p=p)

    def without_buses(self, buses: Sequence[int]) -> "InjectionVector":
        """Forget the exogenous injections of some buses."""
        p = self.p.copy()
        q = self.q.copy()
        p[list(buses)] = 0
        q[list(buses)] = 0
        return replace(self, p=p, q=q)

    def complex_power(self, model: FeederModel) -> np.ndarray:
        """Return the specified complex injection s of every bus."""
        if len(self.u) != len(model.der_buses):
            raise PowerFlowError(f"Expected {len(model.der_buses)} DER set-points, got {len(self.u)}.")
        q = np.array(self.q, dtype=float)
        np.add.at(q, list(model.der_buses), self.u)
        s = self.p + 1j * q
        s[model.slack] = 0
        return s

    def key(self) -> tuple:
        """A hashable identity of the exogenous injections."""
        return tuple(self.p.tolist()) + tuple(self.q.tolist())


@dataclass(frozen=True, eq=False)
class GridOperatingPoint:
    """Complex bus voltages v and injections s = v conj(Y v) in p.u."""
    v: np.ndarray
    s: np.ndarray
    converged: bool
    iterations: int
    residual: float
    solver: str = ""
    message: str = ""


def mismatch(model: FeederModel, v: np.ndarray, s_specified: np.ndarray) -> float:
    """Return the largest power mismatch of the non-slack buses in p.u."""
    Y = bus_admittance(model)
    s = v * np.conj(Y @ v)
    buses = list(model.non_slack)
    return float(np.max(np.abs(s_specified[buses] - s[buses]), initial=0.0))


def _operating_point(model, v, converged, iterations, residual, solver, message=""):
    Y = bus_admittance(model)
    op = GridOperatingPoint(
        v=v, s=v * np.conj(Y @ v), converged=converged,
        iterations=iterations, residual=residual, solver=solver, message=message)
    if not converged:
        logger.warning("%s power flow failed after %d iterations: %s (residual %.3e)",
                       solver, iterations, message, residual)
    return op


def _flat_start(model: FeederModel) -> np.ndarray:
    return np.full(len(model.buses), complex(model.slack_voltage))


def _dsbus_dv(Y, V):
    """Partial derivatives of the bus injections by magnitude and angle."""
    I = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vnorm)) + np.diag(np.conj(I) * Vnorm)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
    return dS_dVm, dS_dVa


def solve_newton(model: FeederModel, inj: InjectionVector,
                 tol: float = DEFAULT_TOLERANCE,
                 max_iter: int = DEFAULT_MAX_ITERATIONS) -> GridOperatingPoint:
    """Solve the power flow with the Newton-Raphson method in polar form."""
    if not tol > 0:
        raise ValueError(f"The tolerance must be positive, not {tol}.")
    Y = bus_admittance(model)
    s_spec = inj.complex_power(model)
    pq = np.array(model.non_slack)
    npq = len(pq)
    V = _flat_start(model)
    Vm = np.abs(V)
    Va = np.angle(V)
    residual = np.inf
    for iteration in range(max_iter + 1):
        mis = V * np.conj(Y @ V) - s_spec
        F = np.r_[mis[pq].real, mis[pq].imag]
        residual = float(np.max(np.abs(F), initial=0.0))
        logger.debug("newton iteration %d, mismatch %.3e", iteration, residual)
        if residual <= tol:
            return _operating_point(model, V, True, iteration, residual, "newton")
        if iteration == max_iter or not np.isfinite(residual):
            break
        dS_dVm, dS_dVa = _dsbus_dv(Y, V)
        J = np.block([
            [dS_dVa[np.ix_(pq, pq)].real, dS_dVm[np.ix_(pq, pq)].real],
            [dS_dVa[np.ix_(pq, pq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return _operating_point(model, V, False, iteration, residual, "newton", "singular Jacobian")
        Va[pq] += dx[:npq]
        Vm[pq] += dx[npq:]
        if np.any(Vm <= 0) or np.any(Vm > DIVERGENCE_BOUND):
            return _operating_point(model, V, False, iteration + 1, residual, "newton", "diverged")
        V = Vm * np.exp(1j * Va)
    return _operating_point(model, V, False, max_iter, residual, "newton", "no convergence")


def _zbus_iterate(model: FeederModel, s_spec: np.ndarray, tol: float, max_iter: int):
    """Run the fixed point iteration on a batch of injections.

    s_spec has one row per case. Return the voltages, the per-case
    convergence, the iterations and the residuals.
    """
    Y = bus_admittance(model)
    ns = list(model.non_slack)
    Z = np.linalg.inv(Y[np.ix_(ns, ns)])
    v_slack = complex(model.slack_voltage)
    s_ns = s_spec[:, ns]
    # without shunts the no-load voltage equals the slack voltage
    V = np.full(s_spec.shape, v_slack)
    converged = np.zeros(len(s_spec), dtype=bool)
    failed = np.zeros(len(s_spec), dtype=bool)
    iterations = np.zeros(len(s_spec), dtype=int)
    residual = np.full(len(s_spec), np.inf)
    for iteration in range(max_iter + 1):
        active = ~(converged | failed)
        S = V[active] * np.conj(V[active] @ Y.T)
        residual[active] = np.max(np.abs(S[:, ns] - s_ns[active]), axis=1, initial=0.0)
        iterations[active] = iteration
        converged[active] = residual[active] <= tol
        active = ~(converged | failed)
        if iteration == max_iter or not active.any():
            break
        V_ns = V[active][:, ns]
        V_new = v_slack + np.conj(s_ns[active] / V_ns) @ Z.T
        bad = ~np.all(np.isfinite(V_new), axis=1) | np.any(np.abs(V_new) > DIVERGENCE_BOUND, axis=1)
        rows = np.flatnonzero(active)
        failed[rows[bad]] = True
        good = rows[~bad]
        V[np.ix_(good, ns)] = V_new[~bad]
    return V, converged, iterations, residual


def solve_zbus(model: FeederModel, inj: InjectionVector,
               tol: float = DEFAULT_TOLERANCE,
               max_iter: int = DEFAULT_MAX_ITERATIONS) -> GridOperatingPoint:
    """Solve the power flow with the Z-bus fixed point iteration."""
    if not tol > 0:
        raise ValueError(f"The tolerance must be positive, not {tol}.")
    s_spec = inj.complex_power(model)
    try:
        V, converged, iterations, residual = _zbus_iterate(model, s_spec[np.newaxis, :], tol, max_iter)
    except np.linalg.LinAlgError:
        return _operating_point(model, _flat_start(model), False, 0, np.inf, "zbus", "singular reduction")
    message = "" if converged[0] else ("diverged" if iterations[0] < max_iter else "no convergence")
    return _operating_point(model, V[0], bool(converged[0]), int(iterations[0]), float(residual[0]), "zbus", message)


def solve_zbus_batch(model: FeederModel, inj: InjectionVector, setpoints: np.ndarray,
                     tol: float = DEFAULT_TOLERANCE, max_iter: int = DEFAULT_MAX_ITERATIONS):
    """Solve one power flow per row of DER set-points.

    Return the complex voltages (one row per case) and the convergence mask.
    """
    s_spec = inj.complex_power(model)
    s_batch = np.tile(s_spec, (len(setpoints), 1))
    s_batch[:, list(model.der_buses)] += 1j * np.asarray(setpoints)
    V, converged, _, _ = _zbus_iterate(model, s_batch, tol, max_iter)
    return V, converged


SOLVERS = {
    "newton": solve_newton,
    "zbus": solve_zbus,
}


def solve(model: FeederModel, inj: InjectionVector, solver: str = "newton",
          tol: float = DEFAULT_TOLERANCE, max_iter: int = DEFAULT_MAX_ITERATIONS) -> GridOperatingPoint:
    """Solve the power flow with the named solver."""
    try:
        method = SOLVERS[solver]
    except KeyError:
        raise ValueError(f"Unknown power flow solver {solver!r}, choose one of {sorted(SOLVERS)}.") from None
    return method(model, inj, tol=tol, max_iter=max_iter)


def voltage_magnitudes(op: GridOperatingPoint, buses: Sequence[int]) -> np.ndarray:
    """Return |v| of the listed buses in the given order."""
    if not op.converged:
        raise PowerFlowError(f"The {op.solver} power flow did not converge: {op.message}.")
    return np.abs(op.v[list(buses)])


def line_losses(model: FeederModel, op: GridOperatingPoint) -> complex:
    """Return the total series losses of the lines in p.u."""
    losses = 0j
    for line in model.lines:
        z = complex(line.r, line.x) / model.base.z_base
        current = (op.v[line.from_bus] - op.v[line.to_bus]) / z
        losses += z * abs(current) ** 2
    return losses


def slack_balance(model: FeederModel, op: GridOperatingPoint) -> Tuple[complex, complex]:
    """Return the slack injection and the line losses.

    The slack bus supplies the losses minus what the other buses inject.
    """
    slack = complex(op.s[model.slack])
    return slack, line_losses(model, op)


__all__ = [
    "InjectionVector", "GridOperatingPoint", "PowerFlowError",
    "solve_newton", "solve_zbus", "solve_zbus_batch", "solve",
    "voltage_magnitudes", "mismatch", "line_losses", "slack_balance",
]
