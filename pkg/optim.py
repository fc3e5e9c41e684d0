"""Optimization kernels shared by the controllers.

Everything in here works in p.u. on the feeder base.
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError, solve as solve_linear
from scipy.optimize import minimize

from grid import FeederModel
from powerflow import InjectionVector, PowerFlowError, solve, solve_zbus_batch, voltage_magnitudes

logger = logging.getLogger(__name__)

VoltageLimits = Tuple[float, float]

FEASIBILITY_TOLERANCE = 1e-6
STEP_TOLERANCE = 1e-4
FINITE_DIFFERENCE_STEP = 1e-6
MAXIMUM_ITERATIONS = 50
# active sets are enumerated up to this dimension
MAXIMUM_ENUMERATION_DIMENSION = 10
ORACLE_CHUNK_SIZE = 4096
MAXIMUM_THREADS = 4


class OptimizationError(ValueError):
    """The input of an optimization kernel is not valid."""


@dataclass(frozen=True, eq=False)
class BoxConstraint:
    """lower <= q <= upper, elementwise."""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float, ndmin=1)
        upper = np.array(self.upper, dtype=float, ndmin=1)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise OptimizationError(f"The bounds have the shapes {lower.shape} and {upper.shape}.")
        if np.any(lower > upper):
            raise OptimizationError(f"The lower bound {lower} exceeds the upper bound {upper}.")
        lower.flags.writeable = upper.flags.writeable = False
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_model(cls, model: FeederModel) -> "BoxConstraint":
        return cls(*model.der_limits())

    @property
    def dimension(self) -> int:
        return len(self.lower)

    def contains(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(self.lower <= q) and np.all(q <= self.upper))

    def clip(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)


class CostWeight:
    """The symmetric positive definite weight M of the cost 1/2 q'Mq."""

    def __init__(self, M):
        M = np.array(M, dtype=float, ndmin=2)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise OptimizationError(f"M must be a square matrix, not of shape {M.shape}.")
        if not np.array_equal(M, M.T):
            raise OptimizationError("M must be exactly symmetric.")
        try:
            self._factor = cho_factor(M)
        except LinAlgError as error:
            raise OptimizationError("M must be positive definite.") from error
        M.flags.writeable = False
        self.M = M

    @classmethod
    def from_diagonal(cls, diagonal) -> "CostWeight":
        return cls(np.diag(np.asarray(diagonal, dtype=float)))

    @property
    def dimension(self) -> int:
        return self.M.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return bool(np.count_nonzero(self.M - np.diag(np.diagonal(self.M))) == 0)

    def cost(self, q) -> float:
        q = np.asarray(q, dtype=float)
        return float(0.5 * q @ self.M @ q)

    def costs(self, qs: np.ndarray) -> np.ndarray:
        """Cost of every row."""
        return 0.5 * np.einsum("ij,jk,ik->i", qs, self.M, qs)

    def solve(self, b) -> np.ndarray:
        """Return M^-1 b."""
        return cho_solve(self._factor, np.asarray(b, dtype=float))

    def norm(self, x) -> float:
        return float(np.sqrt(2 * self.cost(x)))

    def __repr__(self):
        return f"CostWeight({self.M.tolist()})"


INVERSE_LIMITS = "inverse-limits"


def cost_weight_for(model: FeederModel, value) -> CostWeight:
    """Build M in p.u. from its configuration.

    value is "inverse-limits", which weighs every DER with one over its
    largest reactive power, or the diagonal of M in 1/kVAr, or a full
    matrix in 1/kVAr.
    """
    kva = model.base.s_base / 1e3
    if isinstance(value, str):
        if value != INVERSE_LIMITS:
            raise OptimizationError(f"Unknown cost weight {value!r}, use {INVERSE_LIMITS!r} or a list of numbers.")
        lower, upper = model.der_limits()
        return CostWeight.from_diagonal(1 / np.maximum(-lower, upper))
    try:
        values = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as error:
        raise OptimizationError(f"The cost weight {value!r} is not numeric.") from error
    if values.ndim == 1:
        values = np.diag(values)
    if values.shape != (len(model.der_buses),) * 2:
        raise OptimizationError(f"The cost weight has the shape {values.shape}, the feeder has {len(model.der_buses)} DERs.")
    return CostWeight(values * kva)


def _enumerate_active_sets(q_unc, box, M):
    """Solve the projection exactly by trying every active set."""
    m = len(q_unc)
    best, best_cost = None, np.inf
    for state in itertools.product((-1, 0, 1), repeat=m):
        state = np.array(state)
        x = np.where(state < 0, box.lower, np.where(state > 0, box.upper, q_unc))
        free = np.flatnonzero(state == 0)
        fixed = np.flatnonzero(state != 0)
        if len(free) and len(fixed):
            rhs = M[np.ix_(free, fixed)] @ (x[fixed] - q_unc[fixed])
            x[free] = q_unc[free] - solve_linear(M[np.ix_(free, free)], rhs, assume_a="pos")
        if np.any(x < box.lower - 1e-12) or np.any(x > box.upper + 1e-12):
            continue
        x = box.clip(x)
        d = x - q_unc
        cost = d @ M @ d
        if cost < best_cost:
            best, best_cost = x, cost
    return best


def project_weighted_box(q_unc, box: BoxConstraint, M: CostWeight) -> np.ndarray:
    """Return the point of the box closest to q_unc in the M-norm."""
    q_unc = np.asarray(q_unc, dtype=float)
    if q_unc.shape != box.lower.shape or M.dimension != box.dimension:
        raise OptimizationError(f"Cannot project a vector of shape {q_unc.shape} with a {box.dimension}-box and a {M.dimension}x{M.dimension} M.")
    if box.contains(q_unc):
        return q_unc.copy()
    if M.is_diagonal:
        return box.clip(q_unc)
    if box.dimension <= MAXIMUM_ENUMERATION_DIMENSION:
        return _enumerate_active_sets(q_unc, box, M.M)
    result = minimize(
        lambda x: 0.5 * (x - q_unc) @ M.M @ (x - q_unc),
        box.clip(q_unc),
        jac=lambda x: M.M @ (x - q_unc),
        bounds=list(zip(box.lower, box.upper)),
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    return box.clip(result.x)


def voltage_violation(v, v_limits: VoltageLimits) -> np.ndarray:
    """Distance of every voltage from [v_min, v_max], zero inside."""
    v_min, v_max = v_limits
    v = np.asarray(v, dtype=float)
    return np.maximum(0, np.maximum(v_min - v, v - v_max))


@dataclass(frozen=True, eq=False)
class OpfResult:
    """The outcome of opf_solve().

    q is None when no feasible set-point exists and the minimum violation
    point was not requested.
    """
    q: Optional[np.ndarray]
    feasible: bool
    cost: float
    iterations: int
    voltages: np.ndarray
    max_violation: float
    message: str = ""


def _der_voltages(model, inj, q, solver):
    op = solve(model, inj.with_setpoints(q), solver=solver)
    return voltage_magnitudes(op, model.der_buses)


def _linearize(model, inj, q, solver):
    v0 = _der_voltages(model, inj, q, solver)
    J = np.empty((len(v0), len(q)))
    for i in range(len(q)):
        dq = np.zeros(len(q))
        dq[i] = FINITE_DIFFERENCE_STEP
        J[:, i] = (_der_voltages(model, inj, q + dq, solver) - v0) / FINITE_DIFFERENCE_STEP
    return v0, J


def _linear_qp(v0, J, q_k, v_limits, box, M):
    """min 1/2 q'Mq subject to the linearized voltage limits and the box."""
    v_min, v_max = v_limits
    constraints = [
        {"type": "ineq", "fun": lambda q: v_max - v0 - J @ (q - q_k), "jac": lambda q: -J},
        {"type": "ineq", "fun": lambda q: v0 + J @ (q - q_k) - v_min, "jac": lambda q: J},
    ]
    result = minimize(
        M.cost, box.clip(q_k), jac=lambda q: M.M @ q,
        bounds=list(zip(box.lower, box.upper)), constraints=constraints,
        method="SLSQP", options={"ftol": 1e-12, "maxiter": 200},
    )
    q = box.clip(result.x)
    linear_violation = voltage_violation(v0 + J @ (q - q_k), v_limits).max(initial=0.0)
    return q, bool(result.success) and linear_violation <= FEASIBILITY_TOLERANCE / 10


def _least_violation(v0, J, q_k, v_limits, box, M, regularization=1e-9):
    """Minimize the squared violation of the linearized voltage limits."""
    v_min, v_max = v_limits

    def objective(q):
        v = v0 + J @ (q - q_k)
        over = np.maximum(0, v - v_max)
        under = np.maximum(0, v_min - v)
        value = over @ over + under @ under + regularization * M.cost(q)
        gradient = 2 * J.T @ (over - under) + regularization * M.M @ q
        return value, gradient

    result = minimize(objective, box.clip(q_k), jac=True, method="L-BFGS-B",
                      bounds=list(zip(box.lower, box.upper)),
                      options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500})
    return box.clip(result.x)


def opf_solve(model: FeederModel, inj: InjectionVector, v_limits: VoltageLimits,
              box: BoxConstraint, M: CostWeight, *, solver: str = "newton",
              tol: float = FEASIBILITY_TOLERANCE, max_iter: int = MAXIMUM_ITERATIONS,
              allow_violation: bool = False) -> OpfResult:
    """Minimize 1/2 q'Mq subject to the voltage limits and the box.

    The voltage limits hold at the DER buses and are evaluated on the
    nonlinear power flow. The problem is solved by sequential
    linearization: the voltages are linearized around the current q by
    finite differences, the resulting convex QP is solved over the box and
    the linearization moves to its solution. When a linearization has no
    feasible point the iterate moves to its least violating point instead.
    """
    if M.dimension != box.dimension or box.dimension != len(model.der_buses):
        raise OptimizationError(f"{len(model.der_buses)} DERs need a box and M of that dimension.")
    q = box.clip(np.zeros(box.dimension))
    linear_feasible = True
    iterations = 0
    try:
        v = _der_voltages(model, inj, q, solver)
        while iterations < max_iter:
            violation = voltage_violation(v, v_limits).max(initial=0.0)
            if iterations == 0 and violation <= tol:
                break
            iterations += 1
            v0, J = _linearize(model, inj, q, solver)
            q_next, linear_feasible = _linear_qp(v0, J, q, v_limits, box, M)
            if not linear_feasible:
                q_next = _least_violation(v0, J, q, v_limits, box, M)
            step = np.max(np.abs(q_next - q))
            q = q_next
            v = _der_voltages(model, inj, q, solver)
            logger.debug("opf iteration %d, step %.3e, violation %.3e", iterations, step,
                         voltage_violation(v, v_limits).max(initial=0.0))
            if step < STEP_TOLERANCE and voltage_violation(v, v_limits).max(initial=0.0) <= tol:
                break
            if step < STEP_TOLERANCE and not linear_feasible:
                break
    except PowerFlowError as error:
        logger.warning("opf aborted: %s", error)
        return OpfResult(None, False, np.nan, iterations, np.full(box.dimension, np.nan), np.inf, str(error))
    max_violation = float(voltage_violation(v, v_limits).max(initial=0.0))
    feasible = max_violation <= tol
    if feasible:
        return OpfResult(q, True, M.cost(q), iterations, v, max_violation)
    message = f"no set-point within the box meets the voltage limits, the violation is at least {max_violation:.3e} p.u."
    logger.info("opf infeasible: %s", message)
    return OpfResult(q if allow_violation else None, False, M.cost(q) if allow_violation else np.nan,
                     iterations, v, max_violation, message)


def lattice_cell_bound(q, M: CostWeight, resolution: float) -> float:
    """Bound the cost difference between q and any point within one lattice cell."""
    q = np.asarray(q, dtype=float)
    return float(resolution * np.abs(M.M @ q).sum() + 0.5 * resolution ** 2 * np.abs(M.M).sum())


@dataclass(frozen=True, eq=False)
class OracleResult:
    """The outcome of opf_grid_oracle(). q is None if no lattice point is feasible."""
    q: Optional[np.ndarray]
    feasible: bool
    cost: float
    evaluated: int
    skipped: int
    cell_bound: float
    verified: bool


def lattice_axes(box: BoxConstraint, resolution: float):
    """The coordinates lower + k * resolution that lie within the box."""
    axes = []
    for lower, upper in zip(box.lower, box.upper):
        count = int(np.floor((upper - lower) / resolution + 1e-9)) + 1
        axes.append(np.minimum(lower + resolution * np.arange(count), upper))
    return axes


def opf_grid_oracle(model: FeederModel, inj: InjectionVector, v_limits: VoltageLimits,
                    box: BoxConstraint, M: CostWeight, resolution: float, *,
                    tol: float = FEASIBILITY_TOLERANCE, chunk_size: int = ORACLE_CHUNK_SIZE,
                    max_workers: int = MAXIMUM_THREADS) -> OracleResult:
    """Find the cheapest feasible point of the box lattice by exhaustion.

    The lattice points are visited in the order of increasing cost, ties
    broken by their lexicographic position. Chunks of them are checked with
    the batched Z-bus power flow until one contains a feasible point, so
    the first feasible point found is the minimum. The winner is checked
    again with the Newton solver.
    """
    if not resolution > 0:
        raise OptimizationError(f"The resolution must be positive, not {resolution}.")
    if len(model.der_buses) > 4:
        raise OptimizationError(f"The oracle enumerates at most 4 DERs, not {len(model.der_buses)}.")
    axes = lattice_axes(box, resolution)
    shape = tuple(len(axis) for axis in axes)
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack([grid.ravel() for grid in grids], axis=1)
    del grids
    costs = M.costs(points)
    order = np.lexsort((np.arange(len(points)), costs))
    ders = list(model.der_buses)
    logger.info("oracle over %s lattice points", "x".join(map(str, shape)))

    def check(chunk):
        candidates = points[chunk]
        V, converged = solve_zbus_batch(model, inj, candidates)
        violation = voltage_violation(np.abs(V[:, ders]), v_limits).max(axis=1, initial=0.0)
        return converged & (violation <= tol), int(np.count_nonzero(~converged))

    chunks = [order[start:start + chunk_size] for start in range(0, len(order), chunk_size)]
    evaluated = skipped = 0
    winner = None
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for start in range(0, len(chunks), max_workers):
            window = chunks[start:start + max_workers]
            for chunk, (feasible, failed) in zip(window, executor.map(check, window)):
                hits = np.flatnonzero(feasible)
                if hits.size:
                    evaluated += int(hits[0]) + 1
                    skipped += failed
                    winner = chunk[hits[0]]
                    break
                evaluated += len(chunk)
                skipped += failed
            if winner is not None:
                break
    if skipped:
        logger.warning("oracle skipped %d lattice points whose power flow failed", skipped)
    if winner is None:
        logger.info("oracle found no feasible lattice point among %d", evaluated)
        return OracleResult(None, False, np.nan, evaluated, skipped, np.nan, False)
    q = points[winner].copy()
    try:
        v = _der_voltages(model, inj, q, "newton")
        verified = bool(voltage_violation(v, v_limits).max(initial=0.0) <= tol + 1e-8)
    except PowerFlowError:
        verified = False
    if not verified:
        logger.warning("the Newton power flow does not confirm the oracle point %s", q)
    return OracleResult(q, True, float(costs[winner]), evaluated, skipped,
                        lattice_cell_bound(q, M, resolution), verified)


__all__ = [
    "BoxConstraint", "CostWeight", "OptimizationError", "OpfResult", "OracleResult",
    "project_weighted_box", "opf_solve", "opf_grid_oracle", "lattice_cell_bound", "cost_weight_for",
    "lattice_axes", "voltage_violation",
]
