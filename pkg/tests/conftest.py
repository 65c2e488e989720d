import numpy as np
import pytest

from survfuse.survival import SurvivalRecord


def records(times, events, prefix="p"):
    return [SurvivalRecord(f"{prefix}{i}", float(t), int(e)) for i, (t, e) in enumerate(zip(times, events))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
