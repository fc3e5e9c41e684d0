"""Feeder topology, per-unit system and the network matrices.

A feeder is described in a YAML file, see feeders/syslab.yml.
All matrices are returned in p.u. and are read-only.
"""
import os
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import yaml
from scipy.linalg import cho_factor, LinAlgError

logger = logging.getLogger(__name__)

HERE = os.path.dirname(__file__) or "."
FEEDERS_PATH = os.path.join(HERE, "feeders")
CANONICAL_FEEDER_PATH = os.path.join(FEEDERS_PATH, "syslab.yml")

SLACK = "slack"
PQ = "PQ"
BUS_KINDS = (SLACK, PQ)
DER_KINDS = ("pv", "battery")


class FeederError(ValueError):
    """The feeder description violates the model."""


@dataclass(frozen=True)
class PerUnitBase:
    """Voltage and power base of the feeder.

    v_base is line-to-line in V, s_base is three-phase in VA.
    """
    v_base: float = 400.0
    s_base: float = 100e3

    def __post_init__(self):
        if not self.v_base > 0 or not self.s_base > 0:
            raise FeederError(f"Bases must be positive, not v_base={self.v_base} and s_base={self.s_base}.")

    @property
    def z_base(self) -> float:
        return self.v_base ** 2 / self.s_base

    def power_to_pu(self, watts):
        """Convert W or VAr into p.u."""
        return np.asarray(watts, dtype=float) / self.s_base

    def pu_to_kw(self, pu):
        """Convert p.u. into kW or kVAr."""
        return np.asarray(pu, dtype=float) * (self.s_base / 1e3)

    def kw_to_pu(self, kw):
        """Convert kW or kVAr into p.u."""
        return np.asarray(kw, dtype=float) * 1e3 / self.s_base

    def ohm_to_pu(self, ohm):
        return ohm / self.z_base


@dataclass(frozen=True)
class DerSpec:
    """Reactive power capability of an inverter in VAr."""
    q_min: float
    q_max: float
    controllable: bool = True
    name: str = ""
    kind: str = "pv"

    def __post_init__(self):
        if not self.q_min < self.q_max:
            raise FeederError(f"DER {self.name!r}: q_min={self.q_min} must be below q_max={self.q_max}.")
        if not self.q_min <= 0 <= self.q_max:
            raise FeederError(f"DER {self.name!r}: zero reactive power must be within [{self.q_min}, {self.q_max}].")
        if self.kind not in DER_KINDS:
            raise FeederError(f"DER {self.name!r}: kind must be one of {DER_KINDS}, not {self.kind!r}.")


@dataclass(frozen=True)
class Bus:
    """A bus with its nominal exogenous injection p [W] and q [VAr]."""
    id: int
    kind: str = PQ
    der: Optional[DerSpec] = None
    name: str = ""
    p: float = 0.0
    q: float = 0.0

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise FeederError(f"Bus {self.id}: kind must be one of {BUS_KINDS}, not {self.kind!r}.")


@dataclass(frozen=True)
class Line:
    """A series impedance r + jx in ohms."""
    from_bus: int
    to_bus: int
    r: float
    x: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise FeederError(f"Line {self.from_bus}-{self.to_bus} connects a bus to itself.")
        if self.r < 0 or self.x < 0:
            raise FeederError(f"Line {self.from_bus}-{self.to_bus}: r and x must not be negative.")
        if self.r == 0 and self.x == 0:
            raise FeederError(f"Line {self.from_bus}-{self.to_bus} has zero impedance.")


@dataclass(frozen=True)
class FeederModel:
    """An immutable feeder."""
    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...]
    base: PerUnitBase = field(default_factory=PerUnitBase)
    radial: bool = True
    slack_voltage: complex = 1.0
    published_reactance: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [bus.id for bus in self.buses]
        if ids != list(range(len(self.buses))):
            raise FeederError(f"Bus ids must be contiguous 0..{len(self.buses) - 1}, not {ids}.")
        slacks = [bus.id for bus in self.buses if bus.kind == SLACK]
        if len(slacks) != 1:
            raise FeederError(f"A feeder needs exactly one slack bus, found {len(slacks)}.")
        for line in self.lines:
            for end in (line.from_bus, line.to_bus):
                if not 0 <= end < len(self.buses):
                    raise FeederError(f"Line {line.from_bus}-{line.to_bus} refers to the unknown bus {end}.")
        if self.radial and len(self.lines) != len(self.buses) - 1:
            raise FeederError(f"A radial feeder with {len(self.buses)} buses has {len(self.buses) - 1} lines, not {len(self.lines)}.")
        unreached = set(ids) - set(_walk(self, slacks[0]))
        if unreached:
            raise FeederError(f"The feeder is not connected, buses {sorted(unreached)} cannot be reached from the slack bus.")

    @property
    def slack(self) -> int:
        return next(bus.id for bus in self.buses if bus.kind == SLACK)

    @property
    def non_slack(self) -> Tuple[int, ...]:
        return tuple(bus.id for bus in self.buses if bus.kind != SLACK)

    @property
    def ders(self) -> Tuple[DerSpec, ...]:
        """The controllable DERs in bus order."""
        return tuple(bus.der for bus in self.buses if bus.der is not None and bus.der.controllable)

    @property
    def der_buses(self) -> Tuple[int, ...]:
        return tuple(bus.id for bus in self.buses if bus.der is not None and bus.der.controllable)

    def der_limits(self):
        """Return the lower and upper reactive power limits of the DERs in p.u."""
        lower = self.base.power_to_pu([der.q_min for der in self.ders])
        upper = self.base.power_to_pu([der.q_max for der in self.ders])
        return lower, upper


def _neighbours(model: FeederModel):
    neighbours = {bus.id: [] for bus in model.buses}
    for index, line in enumerate(model.lines):
        neighbours[line.from_bus].append((line.to_bus, index))
        neighbours[line.to_bus].append((line.from_bus, index))
    return neighbours


def _walk(model: FeederModel, start: int):
    """Breadth-first order of the buses reachable from start."""
    neighbours = _neighbours(model)
    seen = {start}
    queue = deque([start])
    while queue:
        bus = queue.popleft()
        yield bus
        for other, _ in neighbours[bus]:
            if other not in seen:
                seen.add(other)
                queue.append(other)


def _read_only(matrix):
    matrix.flags.writeable = False
    return matrix


@lru_cache(maxsize=64)
def bus_admittance(model: FeederModel) -> np.ndarray:
    """Return the bus admittance matrix Y in p.u.

    The feeder has no shunt elements, so every row sums to zero.
    """
    n = len(model.buses)
    Y = np.zeros((n, n), dtype=complex)
    for line in model.lines:
        z = complex(line.r, line.x) / model.base.z_base
        if z == 0:
            raise FeederError(f"Line {line.from_bus}-{line.to_bus} has zero impedance.")
        y = 1 / z
        f, t = line.from_bus, line.to_bus
        Y[f, f] += y
        Y[t, t] += y
        Y[f, t] -= y
        Y[t, f] -= y
    return _read_only(Y)


def _paths_from_slack(model: FeederModel):
    """Map each bus to the set of line indices between it and the slack bus."""
    neighbours = _neighbours(model)
    paths = {model.slack: frozenset()}
    queue = deque([model.slack])
    while queue:
        bus = queue.popleft()
        for other, index in neighbours[bus]:
            if other not in paths:
                paths[other] = paths[bus] | {index}
                queue.append(other)
    return paths


def reduced_susceptance_inverse(model: FeederModel) -> np.ndarray:
    """Invert the reduced Laplacian of the line susceptances 1/x."""
    n = len(model.buses)
    L = np.zeros((n, n))
    for line in model.lines:
        if line.x == 0:
            raise FeederError(f"Line {line.from_bus}-{line.to_bus} has no reactance, the reduction is singular.")
        b = model.base.z_base / line.x
        f, t = line.from_bus, line.to_bus
        L[f, f] += b
        L[t, t] += b
        L[f, t] -= b
        L[t, f] -= b
    keep = list(model.non_slack)
    try:
        inverse = np.linalg.inv(L[np.ix_(keep, keep)])
    except np.linalg.LinAlgError as error:
        raise FeederError("The reduced susceptance Laplacian is singular.") from error
    full = np.zeros((n, n))
    full[np.ix_(keep, keep)] = inverse
    return full


@lru_cache(maxsize=64)
def reduced_reactance(model: FeederModel) -> np.ndarray:
    """Return the reduced bus reactance matrix X over the DER buses in p.u.

    Resistances are ignored. On a radial feeder X[h, k] is the sum of the
    reactances on the common path from the slack bus to h and k. A meshed
    feeder falls back to inverting the reduced susceptance Laplacian.
    """
    ders = model.der_buses
    m = len(ders)
    if model.radial:
        paths = _paths_from_slack(model)
        X = np.zeros((m, m))
        for i in range(m):
            for j in range(i, m):
                common = paths[ders[i]] & paths[ders[j]]
                X[i, j] = X[j, i] = sum(model.lines[index].x for index in sorted(common)) / model.base.z_base
    else:
        logger.info("meshed feeder, inverting the reduced susceptance Laplacian")
        full = reduced_susceptance_inverse(model)
        X = full[np.ix_(ders, ders)]
        X = np.triu(X) + np.triu(X, 1).T
    try:
        cho_factor(X)
    except LinAlgError as error:
        raise FeederError("The reduced reactance matrix is not positive definite.") from error
    return _read_only(X)


def reactance_discrepancy(computed, published) -> dict:
    """Compare a computed reactance matrix with a published one."""
    computed = np.asarray(computed, dtype=float)
    published = np.asarray(published, dtype=float)
    difference = np.abs(computed - published)
    return {
        "max_abs": float(difference.max()),
        "max_rel": float((difference / np.abs(published)).max()),
    }


def scale_impedances(model: FeederModel, factor: float) -> FeederModel:
    """Return a copy of the feeder with every line impedance multiplied."""
    if not factor > 0:
        raise FeederError(f"The impedance scale must be positive, not {factor}.")
    lines = tuple(replace(line, r=line.r * factor, x=line.x * factor) for line in model.lines)
    return replace(model, lines=lines)


def feeder_from_dict(data: dict) -> FeederModel:
    """Build a feeder from the structure of a feeder file."""
    if not isinstance(data, dict):
        raise FeederError("A feeder description must be a mapping.")
    try:
        base = PerUnitBase(**data.get("base", {}))
        buses = []
        for entry in data["buses"]:
            der = entry.get("der")
            if der is not None:
                der = DerSpec(
                    q_min=float(der["q_min_kvar"]) * 1e3,
                    q_max=float(der["q_max_kvar"]) * 1e3,
                    controllable=bool(der.get("controllable", True)),
                    name=str(der.get("name", "")),
                    kind=str(der.get("kind", "pv")),
                )
            buses.append(Bus(
                id=int(entry["id"]),
                kind=str(entry.get("kind", PQ)),
                der=der,
                name=str(entry.get("name", "")),
                p=float(entry.get("p_kw", 0.0)) * 1e3,
                q=float(entry.get("q_kvar", 0.0)) * 1e3,
            ))
        lines = [
            Line(int(entry["from"]), int(entry["to"]), float(entry["r_ohm"]), float(entry["x_ohm"]))
            for entry in data["lines"]
        ]
        published = data.get("published_reactance")
        if published is not None:
            published = tuple(tuple(float(value) for value in row) for row in published)
        return FeederModel(
            buses=tuple(buses),
            lines=tuple(lines),
            base=base,
            radial=bool(data.get("radial", True)),
            slack_voltage=complex(data.get("slack_voltage", 1.0)),
            published_reactance=published,
        )
    except (KeyError, TypeError) as error:
        raise FeederError(f"Incomplete feeder description: {error!r}") from error


def load_feeder(path: str) -> FeederModel:
    """Load a feeder file."""
    try:
        with open(path, encoding="UTF-8") as file:
            data = yaml.safe_load(file)
    except OSError as error:
        raise FeederError(f"{path}: {error.strerror}") from error
    except yaml.YAMLError as error:
        mark = getattr(error, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise FeederError(f"{path}{line}: {getattr(error, 'problem', error)}") from error
    try:
        return feeder_from_dict(data)
    except FeederError as error:
        raise FeederError(f"{path}: {error}") from error


def canonical_feeder() -> FeederModel:
    """Return the SYSLAB feeder of the experiments."""
    return load_feeder(CANONICAL_FEEDER_PATH)


__all__ = [
    "PerUnitBase", "DerSpec", "Bus", "Line", "FeederModel", "FeederError",
    "bus_admittance", "reduced_reactance", "canonical_feeder",
    "load_feeder", "feeder_from_dict", "scale_impedances", "reactance_discrepancy",
    "reduced_susceptance_inverse",
]
