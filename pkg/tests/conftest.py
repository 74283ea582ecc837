import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reference_values import TABLE1_M, TABLE2_M  # noqa: E402
from relmm.simulation import preset, run_monte_carlo  # noqa: E402

ACCEPTANCE_LINES = []
N_SIM = 1000


@pytest.fixture(scope="session")
def table1_reports():
    return {m: run_monte_carlo(preset("table1", m, n_sim=N_SIM)) for m in TABLE1_M}


@pytest.fixture(scope="session")
def table2_reports():
    return {m: run_monte_carlo(preset("table2", m, n_sim=N_SIM)) for m in TABLE2_M}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
