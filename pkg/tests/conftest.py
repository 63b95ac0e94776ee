import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------
# Tests marked ``criterion(n)`` are grouped; the terminal summary prints one
# PASS/FAIL line per criterion (a criterion passes when all its tests pass).

_CRITERIA = {}


def pytest_runtest_logreport(report):
    mark = _criterion_of.get(report.nodeid)
    if mark is None:
        return
    _CRITERIA.setdefault(mark, True)
    if report.failed or (report.when == "call" and report.skipped):
        _CRITERIA[mark] = False
    elif report.when == "setup" and report.skipped:
        _CRITERIA[mark] = False


_criterion_of = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
