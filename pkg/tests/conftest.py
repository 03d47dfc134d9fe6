"""Shared closed-loop runs and the acceptance summary printer.

The long simulations are session-scoped so every test that needs the 40 s
runs reuses a single copy.
"""

import pytest

from cpfmpc.sim.runner import run_cpf, run_decoupled
from cpfmpc.sim.scenario import bundled

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def q100_scenario():
    return bundled("paper_q100")


@pytest.fixture(scope="session")
def q01_scenario():
    return bundled("paper_q01")


@pytest.fixture(scope="session")
def q100_run(q100_scenario):
    return run_cpf(q100_scenario)


@pytest.fixture(scope="session")
def q01_run(q01_scenario):
    return run_cpf(q01_scenario)


@pytest.fixture(scope="session")
def fixed_point_scenario():
    return bundled("fixed_point")


@pytest.fixture(scope="session")
def fixed_point_run(fixed_point_scenario):
    return run_cpf(fixed_point_scenario)


@pytest.fixture(scope="session")
def decoupled_q100_run(q100_scenario):
    return run_decoupled(q100_scenario)


@pytest.fixture(scope="session")
def decoupled_q01_run(q01_scenario):
    return run_decoupled(q01_scenario)


@pytest.fixture
def detail(request):
    """Append ``key=value`` notes that the acceptance summary prints."""
    notes = []
    request.node.user_properties.append(("detail", notes))
    return notes


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or "test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        notes = next((v for k, v in report.user_properties if k == "detail"), [])
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        _ACCEPTANCE.append((name, report.outcome, "; ".join(notes)))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, notes in sorted(_ACCEPTANCE):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  [{notes}]" if notes else ""))
