import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from medcal.simlab import DgpSpec, Scenario, generate, rng_for

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def assert_balanced(fit, tol=1e-6):
    """Balancing and normalization checks shared by every converged fit."""
    assert fit.converged
    assert fit.balance_residual <= tol
    assert abs(fit.in_sample_weights.mean() - 1.0) <= tol


@pytest.fixture(scope="session")
def scenario3_400():
    return generate(DgpSpec(Scenario.III, 400), rng_for(7, 3))


@pytest.fixture(scope="session")
def binary_600():
    return generate(DgpSpec(Scenario.BINARY, 600), rng_for(7, 4))


ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
