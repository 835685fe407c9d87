from pathlib import Path

import numpy as np
import pytest

from fridgesim import calibration, tables
from fridgesim.sensors import TempLevel

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"
SCENARIOS = FIXTURES / "scenarios"


@pytest.fixture(scope="session")
def table1_curve():
    return calibration.fit_curve(calibration.table_samples(include_on_state=False))


@pytest.fixture(scope="session")
def pooled_curve():
    return calibration.default_curve()


@pytest.fixture
def rng():
    return np.random.default_rng(20191102)


@pytest.fixture(scope="session")
def weight_cells():
    return list(tables.off_state_cells()) + list(tables.on_state_cells())


def level(name: str) -> TempLevel:
    return TempLevel(name)


# -- acceptance summary: one pass/fail line per criterion ---------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and report.passed:
        return
    number, title = mark.args
    if report.failed:
        detail = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else ""
        _CRITERIA[number] = ("FAIL", title, detail)
    elif report.when == "call":
        _CRITERIA[number] = ("PASS", title, "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:2d}  {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
