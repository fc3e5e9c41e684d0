#!/usr/bin/env python3
"""Command line of the Volt/VAr testbed.

    python app.py run --strategy droop --out out/droop
    python app.py compare --out out/compare
    python app.py sweep alpha 1 10 100 1000 10000
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

import click
import pandas as pd

from control_base import ControllerError
from control_fo import X_SOURCES
from experiments import Comparison, FAILED, Sweep
from grid import FeederError
from optim import OptimizationError
from plot import plot_run
from sim import (
    CSV_FLOAT_FORMAT, STRATEGIES, Scenario, ScenarioError, load_default_scenario, load_scenario_file,
    make_controller, merge_specification, run, violation_metrics,
)

# constants
DEFAULT_OUTPUT = "out"
LOG_FILE_NAME = "log.csv"
METRICS_FILE_NAME = "metrics.csv"
FIGURE_FILE_NAME = "run.png"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

# exit codes
EXIT_CONFIGURATION_ERROR = 1
EXIT_SIMULATION_FAILURE = 2

CONFIGURATION_ERRORS = (ScenarioError, ControllerError, FeederError, OptimizationError)


def get_default_scenario():
    """Return the default scenario."""
    return load_default_scenario()


def get_scenario_specification(scenario_path=None, overrides=None):
    """Build the scenario specification.

    The scenario file overrides the defaults, the overrides of the command
    line override both.
    """
    specification = get_default_scenario()
    if scenario_path:
        specification = merge_specification(specification, load_scenario_file(scenario_path))
    return merge_specification(specification, overrides or {})


@dataclass
class RunConfig:
    """The choices made on the command line, None keeps the scenario's value."""
    feeder: Optional[str] = None
    scenario: Optional[str] = None
    strategy: Optional[str] = None
    alpha: Optional[float] = None
    x_source: Optional[str] = None
    noise_std: Optional[float] = None
    seed: Optional[int] = None
    out: str = DEFAULT_OUTPUT

    def overrides(self) -> dict:
        overrides = {}
        controller = {}
        fo = {}
        noise = {}
        if self.feeder is not None:
            overrides["feeder"] = self.feeder
        if self.strategy is not None:
            controller["strategy"] = self.strategy
        if self.alpha is not None:
            fo["alpha"] = self.alpha
        if self.x_source is not None:
            fo["x_source"] = self.x_source
        if self.noise_std is not None:
            noise["stddev"] = self.noise_std
        if self.seed is not None:
            noise["seed"] = self.seed
        if fo:
            controller["fo"] = fo
        if controller:
            overrides["controller"] = controller
        if noise:
            overrides["noise"] = noise
        return overrides

    def specification(self) -> dict:
        return get_scenario_specification(self.scenario, self.overrides())


def scenario_options(function):
    """Add the options shared by all commands."""
    options = [
        click.option("--feeder", type=click.Path(), help="feeder file"),
        click.option("--scenario", type=click.Path(), help="scenario file in YAML or JSON"),
        click.option("--strategy", help=f"controller, one of {', '.join(sorted(STRATEGIES))}"),
        click.option("--alpha", type=float, help="gain of the feedback optimization"),
        click.option("--x-source", help=f"sensitivity matrix, one of {', '.join(X_SOURCES)}"),
        click.option("--noise-std", type=float, help="standard deviation of the voltage measurements in p.u."),
        click.option("--seed", type=int, help="seed of the measurement noise"),
        click.option("--out", type=click.Path(file_okay=False), default=DEFAULT_OUTPUT, show_default=True,
                     help="output directory"),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def fail(message, code):
    """Report an error and exit."""
    click.echo(f"Error: {message}", err=True)
    click.get_current_context().exit(code)


def show(table: pd.DataFrame):
    click.echo(table.to_string(index=False))


class Cli(click.Group):
    """A group whose usage errors exit like the configuration errors."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as error:
            error.exit_code = EXIT_CONFIGURATION_ERROR
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as error:
            error.exit_code = EXIT_CONFIGURATION_ERROR
            raise


@click.group(cls=Cli)
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default="WARNING",
              show_default=True)
def cli(log_level):
    """Simulate Volt/VAr control of a distribution feeder."""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")


@cli.command("run")
@scenario_options
def cmd_run(**options):
    """Run one scenario and write its log, metrics and figure."""
    config = RunConfig(**options)
    try:
        scenario = Scenario.from_specification(config.specification())
        controller = make_controller(scenario)
    except CONFIGURATION_ERRORS as error:
        fail(error, EXIT_CONFIGURATION_ERROR)
    log = run(scenario, controller)
    os.makedirs(config.out, exist_ok=True)
    log.to_csv(os.path.join(config.out, LOG_FILE_NAME))
    if not log.completed:
        fail(log.failure, EXIT_SIMULATION_FAILURE)
    metrics = pd.DataFrame([violation_metrics(log).as_row()])
    metrics.insert(0, "strategy", log.strategy)
    metrics.to_csv(os.path.join(config.out, METRICS_FILE_NAME), index=False, float_format=CSV_FLOAT_FORMAT)
    plot_run(log, os.path.join(config.out, FIGURE_FILE_NAME))
    show(metrics)


def run_suite(suite, out):
    table = suite.run_all()
    suite.write(out)
    show(table)
    if "status" in table and (table["status"] == FAILED).any():
        fail(f"{int((table['status'] == FAILED).sum())} runs failed, see {out}", EXIT_SIMULATION_FAILURE)


@cli.command("compare")
@scenario_options
def cmd_compare(**options):
    """Compare droop, OPF dispatch and feedback optimization."""
    config = RunConfig(**options)
    try:
        suite = Comparison(config.specification())
    except CONFIGURATION_ERRORS as error:
        fail(error, EXIT_CONFIGURATION_ERROR)
    run_suite(suite, config.out)


@cli.command("sweep")
@click.argument("parameter")
@click.argument("values", nargs=-1, type=float)
@scenario_options
def cmd_sweep(parameter, values, **options):
    """Run the scenario once per value of PARAMETER.

    PARAMETER is alpha, noise_stddev or x_perturbation. Without VALUES the
    values of the scenario are used.
    """
    config = RunConfig(**options)
    try:
        suite = Sweep(config.specification(), parameter, values)
    except CONFIGURATION_ERRORS as error:
        fail(error, EXIT_CONFIGURATION_ERROR)
    run_suite(suite, config.out)


if __name__ == "__main__":
    cli()
