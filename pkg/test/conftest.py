import os
import sys

import numpy as np
import pytest
from click.testing import CliRunner

# constants
HERE = os.path.dirname(__file__) or "."

# relative imports
sys.path.append(os.path.join(os.path.abspath(HERE), ".."))
sys.path.append(os.path.abspath(HERE))
from grid import canonical_feeder, feeder_from_dict
from sim import canonical_scenario, run


def chain(reactances, resistances=None, limits_kvar=6.0, base=None, slack_voltage=1.0, p_kw=None):
    """A radial chain with a DER on every bus after the slack bus."""
    if resistances is None:
        resistances = [0.0] * len(reactances)
    if p_kw is None:
        p_kw = [0.0] * len(reactances)
    buses = [{"id": 0, "kind": "slack"}]
    for index, p in enumerate(p_kw, start=1):
        buses.append({
            "id": index, "p_kw": p,
            "der": {"name": f"DER{index}", "q_min_kvar": -limits_kvar, "q_max_kvar": limits_kvar},
        })
    lines = [
        {"from": index, "to": index + 1, "r_ohm": r, "x_ohm": x}
        for index, (r, x) in enumerate(zip(resistances, reactances))
    ]
    return feeder_from_dict({
        "base": base or {"v_base": 1.0, "s_base": 1.0},
        "slack_voltage": slack_voltage,
        "buses": buses,
        "lines": lines,
    })


@pytest.fixture()
def make_chain():
    """Build radial chains, see chain()."""
    return chain


@pytest.fixture(scope="session")
def feeder():
    return canonical_feeder()


@pytest.fixture()
def rng():
    return np.random.default_rng(20211)


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="session")
def fo_log():
    """The canonical experiment with feedback optimization."""
    return run(canonical_scenario("fo"))


@pytest.fixture(scope="session")
def droop_log():
    """The canonical experiment with droop control."""
    return run(canonical_scenario("droop"))
