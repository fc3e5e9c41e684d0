"""
This tests the resolution of the scenario and the command line,
as described in the api.md file.
"""
import os

import pandas as pd
import pytest

from app import (
    EXIT_CONFIGURATION_ERROR, EXIT_SIMULATION_FAILURE, RunConfig, cli,
    get_default_scenario, get_scenario_specification,
)


def write_scenario(tmp_path, content, name="scenario.yml"):
    path = tmp_path / name
    path.write_text(content)
    return str(path)


def test_specification_equals_default_scenario_by_default():
    assert get_scenario_specification() == get_default_scenario()


def test_scenario_file_overrides_the_defaults(tmp_path):
    path = write_scenario(tmp_path, "duration_s: 300\ncontroller:\n  fo:\n    alpha: 10\n")
    specification = get_scenario_specification(path)
    assert specification["duration_s"] == 300
    assert specification["controller"]["fo"]["alpha"] == 10
    assert specification["controller"]["fo"]["x_source"] == "published"
    assert specification["control_period_s"] == 10


def test_command_line_overrides_the_scenario_file(tmp_path):
    path = write_scenario(tmp_path, "controller:\n  fo:\n    alpha: 10\n")
    config = RunConfig(scenario=path, alpha=1000, strategy="droop")
    specification = config.specification()
    assert specification["controller"]["fo"]["alpha"] == 1000
    assert specification["controller"]["strategy"] == "droop"


def test_scenario_files_can_be_json(tmp_path):
    path = write_scenario(tmp_path, '{"noise": {"stddev": 0.002}}', "scenario.json")
    specification = get_scenario_specification(path)
    assert specification["noise"] == {"stddev": 0.002, "seed": 0, "truncation": 4}


def test_unset_options_do_not_override():
    assert RunConfig().overrides() == {}
    assert RunConfig(noise_std=0.002, seed=4, x_source="ones").overrides() == {
        "controller": {"fo": {"x_source": "ones"}},
        "noise": {"stddev": 0.002, "seed": 4},
    }


def test_run_writes_the_log_the_metrics_and_the_figure(runner, tmp_path):
    out = tmp_path / "droop"
    result = runner.invoke(cli, ["run", "--strategy", "droop", "--out", str(out)])
    assert result.exit_code == 0, result.output
    for name in ["log.csv", "metrics.csv", "run.png"]:
        assert os.path.isfile(out / name), name
    log = pd.read_csv(out / "log.csv")
    assert len(log) == 126
    metrics = pd.read_csv(out / "metrics.csv")
    assert metrics["strategy"].item() == "droop"
    assert "steady_state_cost" in result.output


def test_run_with_a_feeder_file(runner, tmp_path):
    feeder = os.path.join(os.path.dirname(__file__), "..", "feeders", "syslab.yml")
    result = runner.invoke(cli, ["run", "--feeder", feeder, "--alpha", "100", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output


@pytest.mark.parametrize("arguments,message", [
    (["--strategy", "mpc"], "mpc"),
    (["--x-source", "guess"], "guess"),
    (["--alpha", "-1"], "alpha"),
    (["--noise-std", "-0.1"], "noise"),
    (["--feeder", "missing.yml"], "missing.yml"),
    (["--scenario", "missing.yml"], "missing.yml"),
])
def test_configuration_errors(runner, tmp_path, arguments, message):
    result = runner.invoke(cli, ["run", "--out", str(tmp_path)] + arguments)
    assert result.exit_code == EXIT_CONFIGURATION_ERROR
    assert "Error:" in result.output
    assert message in result.output
    assert not os.path.exists(tmp_path / "log.csv")


@pytest.mark.parametrize("arguments", [
    ["run", "--alpha", "abc"],
    ["run", "--seed", "1.5"],
    ["run", "--out", "{file}"],
    ["run", "--unknown"],
    ["sweep", "alpha", "ten"],
    ["--log-level", "loud", "run"],
    ["simulate"],
])
def test_usage_errors_are_configuration_errors(runner, tmp_path, arguments):
    existing_file = tmp_path / "metrics.csv"
    existing_file.write_text("")
    result = runner.invoke(cli, [argument.format(file=existing_file) for argument in arguments])
    assert result.exit_code == EXIT_CONFIGURATION_ERROR, result.output
    assert "Error" in result.output


def test_a_failing_simulation_keeps_the_partial_log(runner, tmp_path):
    path = write_scenario(tmp_path, (
        "events:\n"
        "- {time_s: 0, kind: controller_on}\n"
        "- {time_s: 100, kind: set_load, bus: 3, value_kw: 5000}\n"
    ))
    out = tmp_path / "out"
    result = runner.invoke(cli, ["run", "--scenario", path, "--out", str(out)])
    assert result.exit_code == EXIT_SIMULATION_FAILURE
    assert "power flow failed" in result.output
    assert len(pd.read_csv(out / "log.csv")) == 10


def test_sweep(runner, tmp_path):
    result = runner.invoke(cli, ["sweep", "alpha", "10", "10000", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics["run"]) == ["alpha=10", "alpha=10000"]
    assert list(metrics["divergent"]) == [False, True]
    assert os.path.isfile(tmp_path / "alpha_10.csv")


def test_sweep_of_an_unknown_parameter(runner, tmp_path):
    result = runner.invoke(cli, ["sweep", "gain", "1", "--out", str(tmp_path)])
    assert result.exit_code == EXIT_CONFIGURATION_ERROR
    assert "gain" in result.output


def test_compare(runner, tmp_path):
    path = write_scenario(tmp_path, "compare:\n  oracle_resolution_kvar: 0.5\n")
    out = tmp_path / "compare"
    result = runner.invoke(cli, ["compare", "--scenario", path, "--out", str(out)])
    assert result.exit_code == 0, result.output
    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == 5
    assert "cost_ratio" in metrics
    assert os.path.isfile(out / "summary.yml")


def test_log_level(runner, tmp_path):
    result = runner.invoke(cli, ["--log-level", "debug", "run", "--strategy", "fo", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
