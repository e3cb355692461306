import math
import time

import numpy as np
import pytest

from metaprism import load_scenario
from metaprism.ideal import bandwidth, scenario_map

ACCEPTANCE_LINES: list[str] = []

SCENARIOS = {
    "TA_half": ((math.pi / 4, math.pi / 2), 0.5),
    "TA_quarter": ((math.pi / 4, math.pi / 2), 0.25),
    "TB_half": ((math.pi / 6, math.pi / 3), 0.5),
    "TB_quarter": ((math.pi / 6, math.pi / 3), 0.25),
}


def scenario_for(name: str, **extra):
    (lo, hi), dnu = SCENARIOS[name]
    over = {"mapping": {"theta_min": lo, "theta_max": hi}, "geometry": {"delta_nu_wl": dnu}}
    for section, values in extra.items():
        over.setdefault(section, {}).update(values)
    return load_scenario(overrides=over)


@pytest.fixture(scope="session")
def table1():
    return load_scenario()


@pytest.fixture(scope="session")
def fmap(table1):
    return scenario_map(table1)


@pytest.fixture(scope="session")
def delta_w(table1, fmap):
    return bandwidth(fmap, table1.geometry).exact


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def optimize_runs(tmp_path_factory):
    """Full optimisation (constrained and unconstrained) of the four reference scenarios."""
    from metaprism.pipeline import run_optimize

    out = {}
    for name in SCENARIOS:
        outdir = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        _, res = run_optimize(scenario_for(name), outdir, "both")
        out[name] = (res, outdir, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def eval_maps(tmp_path_factory):
    """Realistic gain maps with Foster loads (no optimisation) for the four scenarios."""
    from metaprism.pipeline import run_realistic_eval

    out = {}
    for name in SCENARIOS:
        outdir = tmp_path_factory.mktemp(f"eval_{name}")
        run_realistic_eval(scenario_for(name), outdir, "foster", n_theta=361)
        data = np.genfromtxt(outdir / "gain_map.csv", delimiter=",", names=True)
        th = np.unique(data["theta_deg"])
        fs = np.unique(data["f_hz"])
        out[name] = (th, fs, data["gain_db"].reshape(fs.size, th.size))
    return out


def read_csv_column(path, column):
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    return np.atleast_1d(data[column])
