import os
from pathlib import Path

import numpy as np
import pytest

from perfusim.scenario import apply_ar_modifications, load_config, run_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

_ACCEPTANCE = []


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ph_config():
    return load_config(SCENARIOS / "ph_desk.toml")


@pytest.fixture(scope="session")
def run_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


def _snapshots():
    # snapshot cadence for the long runs; 0 disables them
    return int(os.environ.get("PERFUSIM_TEST_SNAPSHOTS", "1"))


@pytest.fixture(scope="session")
def ph_run(ph_config, run_dir):
    return run_scenario(ph_config, output_dir=run_dir / "ph", serial=True, snapshots=bool(_snapshots()))


@pytest.fixture(scope="session")
def ph_rerun(ph_config, run_dir):
    return run_scenario(ph_config, output_dir=run_dir / "ph_repeat", serial=True, snapshots=False)


@pytest.fixture(scope="session")
def ar_run(ph_config, run_dir):
    ar = apply_ar_modifications(ph_config, 0.045, 1.2, 0.8)
    return run_scenario(ar, output_dir=run_dir / "ar", serial=True, snapshots=False)
