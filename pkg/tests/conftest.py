import shutil
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from knitwit import lang as L

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
sys.path.insert(0, str(HERE))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

HAVE_Z3 = shutil.which("z3") is not None
needs_z3 = pytest.mark.skipif(not HAVE_Z3, reason="z3 is not installed")


def load(name: str) -> L.Program:
    return L.parse_program((FIXTURES / name).read_text())


@pytest.fixture
def fig1():
    return load("fig1.kw")


# One pass/fail line per acceptance criterion, printed after the run.
_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if not name.startswith("test_criterion_") or report.when != "call" and report.passed:
        return
    number = int(name.split("_")[2])
    if report.when == "call" or report.failed:
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[number] = (outcome, name, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        outcome, name, duration = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {outcome}  {name} ({duration:.1f}s)")
