"""Shared fixtures and the acceptance report.

Acceptance tests call ``criterion(n, ok, detail)``; one PASS/FAIL line per
criterion is printed in the terminal summary.
"""
import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str = "") -> None:
        _RESULTS[n] = (bool(ok), detail)
        assert ok, f"criterion {n} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_scenario():
    from falcon_mp import harness as H
    return H.Scenario.preset(["4g", "wlan"])


@pytest.fixture(scope="session")
def bank():
    """Meta-model bank bootstrapped from simulated prior experience."""
    from falcon_mp import harness as H
    return H.bootstrap_bank(0)


@pytest.fixture(scope="session")
def dqn_off_policy(desk_scenario):
    from falcon_mp import harness as H
    return H.train_dqn_off(desk_scenario, 0)
