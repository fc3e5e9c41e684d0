"""Suites of runs: the comparison of the strategies and parameter sweeps.

A suite runs its variants in parallel. A variant that fails becomes a
failed row of the table, the others are still produced.
"""
import io
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from threading import RLock
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
import yaml

from grid import reactance_discrepancy, reduced_reactance
from optim import BoxConstraint, opf_grid_oracle, opf_solve
from plot import plot_profile, plot_run
from powerflow import solve
from sim import (
    CSV_FLOAT_FORMAT, Scenario, ScenarioError, SimulationLog, divergence_detected,
    injections_at, make_controller, merge_specification, run, violation_metrics,
)

logger = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"

Variant = Tuple[str, dict]


class ExperimentSuite:
    """Base class for suites."""

    def __init__(self, specification: dict):
        self.specification = specification
        self.lock = RLock()
        self.rows: List[dict] = []
        self.logs: Dict[str, SimulationLog] = {}
        self.maximum_threads = int(specification["maximum_threads"])
        self.created()
        self.scenarios = self.validate()

    def created(self):
        """Template method for subclasses."""

    def variants(self) -> List[Variant]:
        """Return the name and the specification of every run."""
        raise NotImplementedError("to be implemented in subclasses")

    def validate(self) -> Dict[str, Scenario]:
        """Build every scenario and its controller before anything runs."""
        scenarios = {}
        for key, specification in self.variants():
            scenario = Scenario.from_specification(specification)
            make_controller(scenario)
            scenarios[key] = scenario
        return scenarios

    def error(self, ty, err, tb, key):
        tb_s = io.StringIO()
        traceback.print_exception(ty, err, tb, file=tb_s)
        return self.convert_error(err, key, tb_s.getvalue())

    def convert_error(self, error, key, tb_s):
        """Create a failed row."""
        logger.error("%s failed: %s\n%s", key, error, tb_s)
        return {"run": key, "status": FAILED, "error": f"{type(error).__name__}: {error}"}

    def run_all(self):
        """Run all variants."""
        with ThreadPoolExecutor(max_workers=self.maximum_threads) as e:
            for _ in e.map(self.run_variant, self.scenarios.items()):
                pass  # no error should pass silently; import this
        self.finished()
        return self.table()

    def run_variant(self, item):
        key, scenario = item
        try:
            log = run(scenario)
            row = {"run": key, "strategy": log.strategy}
            if log.completed:
                row["status"] = OK
                row.update(self.evaluate(key, scenario, log))
            else:
                row["status"] = FAILED
                row["error"] = log.failure
            with self.lock:
                self.logs[key] = log
        except Exception:
            ty, err, tb = sys.exc_info()
            row = self.error(ty, err, tb, key)
        with self.lock:
            self.rows.append(row)

    def evaluate(self, key: str, scenario: Scenario, log: SimulationLog) -> dict:
        """Return the metrics of a run."""
        return violation_metrics(log).as_row()

    def finished(self):
        """Template method for subclasses, called after all runs."""

    def table(self) -> pd.DataFrame:
        """The rows in the order of the variants."""
        order = {key: index for index, key in enumerate(self.scenarios)}
        rows = sorted(self.rows, key=lambda row: order[row["run"]])
        return pd.DataFrame(rows)

    def summary(self) -> dict:
        return {}

    def write(self, directory: str):
        """Write the table, the logs, the figures and the summary."""
        os.makedirs(directory, exist_ok=True)
        self.table().to_csv(os.path.join(directory, "metrics.csv"), index=False, float_format=CSV_FLOAT_FORMAT)
        for key, log in sorted(self.logs.items()):
            name = file_name(key)
            log.to_csv(os.path.join(directory, name + ".csv"))
            plot_run(log, os.path.join(directory, name + ".png"), title=key)
        summary = self.summary()
        if summary:
            with open(os.path.join(directory, "summary.yml"), "w", encoding="UTF-8") as file:
                yaml.safe_dump(summary, file, sort_keys=False)


def file_name(key: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in key)


class Comparison(ExperimentSuite):
    """The strategies side by side on one scenario.

    The steady state cost of every run is compared with the optimal cost of
    the final injections, found by the OPF and checked by the lattice
    oracle.
    """

    def created(self):
        compare = self.specification["compare"]
        self.runs = compare.get("runs") or {}
        if not self.runs:
            raise ScenarioError("The comparison has no runs.")
        self.oracle_resolution_kvar = float(compare["oracle_resolution_kvar"])
        self.optimum = None
        self.oracle = None

    def variants(self):
        return [(key, merge_specification(self.specification, entry or {})) for key, entry in self.runs.items()]

    def finished(self):
        scenario = next(iter(self.scenarios.values()))
        feeder = scenario.feeder
        inj = injections_at(scenario)
        box = BoxConstraint.from_model(feeder)
        M = scenario.cost_weight()
        self.optimum = opf_solve(feeder, inj, scenario.v_limits, box, M)
        if self.oracle_resolution_kvar > 0:
            resolution = float(feeder.base.kw_to_pu(self.oracle_resolution_kvar))
            self.oracle = opf_grid_oracle(feeder, inj, scenario.v_limits, box, M, resolution)
        if not self.optimum.feasible:
            logger.warning("the final injections have no feasible set-points, no cost ratio")
            return
        for row in self.rows:
            if row.get("status") == OK:
                row["cost_ratio"] = row["steady_state_cost"] / self.optimum.cost if self.optimum.cost > 0 else np.nan

    def summary(self):
        scenario = next(iter(self.scenarios.values()))
        feeder = scenario.feeder
        summary = {"optimal_cost": None, "optimal_q_kvar": None}
        if self.optimum is not None and self.optimum.feasible:
            summary["optimal_cost"] = self.optimum.cost
            summary["optimal_q_kvar"] = feeder.base.pu_to_kw(self.optimum.q).tolist()
        if self.oracle is not None:
            summary["oracle"] = {
                "feasible": self.oracle.feasible,
                "cost": None if not self.oracle.feasible else self.oracle.cost,
                "cell_bound": None if not self.oracle.feasible else self.oracle.cell_bound,
                "evaluated": self.oracle.evaluated,
                "verified": self.oracle.verified,
            }
        if feeder.published_reactance is not None:
            summary["reactance_discrepancy"] = reactance_discrepancy(
                reduced_reactance(feeder), feeder.published_reactance)
        return summary

    def open_loop_operating_point(self):
        """The plant at the start of the scenario without reactive power."""
        scenario = next(iter(self.scenarios.values()))
        inj = injections_at(scenario, 0)
        return solve(scenario.feeder, inj, scenario.solver, scenario.pf_tolerance, scenario.pf_max_iterations)

    def write(self, directory: str):
        super().write(directory)
        scenario = next(iter(self.scenarios.values()))
        op = self.open_loop_operating_point()
        if not op.converged:
            logger.warning("the open-loop power flow failed, no voltage profile")
            return
        plot_profile(scenario.feeder, op, os.path.join(directory, "profile.png"), scenario.v_limits,
                     title=f"{scenario.name}, open loop")


class Sweep(ExperimentSuite):
    """One run per value of a parameter."""

    def __init__(self, specification: dict, parameter: str, values):
        self.parameter = parameter
        self.values = list(values)
        super().__init__(specification)

    def created(self):
        parameters = (self.specification.get("sweep") or {}).get("parameters") or {}
        if self.parameter not in parameters:
            raise ScenarioError(f"Cannot sweep {self.parameter!r}, choose one of {sorted(parameters)}.")
        self.path = list(parameters[self.parameter])
        if not self.values:
            self.values = list((self.specification.get("sweep") or {}).get(self.parameter) or [])
        if not self.values:
            raise ScenarioError(f"No values to sweep {self.parameter} over.")

    def key(self, value) -> str:
        return f"{self.parameter}={value:g}"

    def variants(self):
        variants = []
        for value in self.values:
            override = value
            for name in reversed(self.path):
                override = {name: override}
            variants.append((self.key(value), merge_specification(self.specification, override)))
        return variants

    def evaluate(self, key, scenario, log):
        row = {self.parameter: self.values[list(self.scenarios).index(key)]}
        row.update(violation_metrics(log).as_row())
        row["divergent"] = divergence_detected(log)
        return row


__all__ = ["ExperimentSuite", "Comparison", "Sweep", "file_name"]
