from pathlib import Path

import pytest

from psfl.oracles import load_table

FIXTURES = Path(__file__).parent / "fixtures"
ORACLES = FIXTURES / "oracles"


@pytest.fixture
def oracle_rows():
    """``oracle_rows(name)`` loads one frozen reference table."""
    return lambda name: load_table(ORACLES / f"{name}.csv")


# ---------------------------------------------------------------------------
# acceptance summary

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, name): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.skipped:
        return
    n, name = mark.args
    ok = _criteria.get(n, (name, True))[1] and not rep.failed
    _criteria[n] = (name, ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {name}: {'PASS' if ok else 'FAIL'}")
