from __future__ import annotations

import pytest

from ecas_sim.experiment import ExperimentSpec, run_sweep


@pytest.fixture(scope="session")
def default_sweep():
    """The full default experiment (eight policies, 31 rounds); shared because it takes ~10 s."""
    return run_sweep(ExperimentSpec())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
