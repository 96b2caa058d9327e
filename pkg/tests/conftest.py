import numpy as np
import pytest

from thermosoc.dataset import EcmParams, simulate_campaign


@pytest.fixture(scope="session")
def ecm():
    return EcmParams()


@pytest.fixture(scope="session")
def warm_cycles(ecm):
    """Eight simulated discharge cycles at 25 degC."""
    return simulate_campaign(ecm, 25.0, 8, seed=0)


@pytest.fixture(scope="session")
def cold_cycles(ecm):
    return simulate_campaign(ecm, -10.0, 3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; lines are repeated in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
