import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance.py::test_criterion_" in rep.nodeid:
                props = dict(rep.user_properties)
                rows.append((props.get("criterion", 0), outcome, props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, outcome, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {num}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}")
