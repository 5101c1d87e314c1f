import numpy as np
import pytest

from magloc.grid import build_grid

SQUARE = (-1.0, 1.0, -1.0, 1.0)


@pytest.fixture
def square():
    return SQUARE


@pytest.fixture
def grid17():
    return build_grid(SQUARE, 17)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary -----------------------------------------------------------

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end criterion with a PASS/FAIL line")


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for name, value in report.user_properties:
        if name == "acceptance":
            _ACCEPTANCE.append(value)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
