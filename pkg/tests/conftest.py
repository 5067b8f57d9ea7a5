"""Acceptance bookkeeping: tests marked ``criterion(n)`` roll up into one
PASS/FAIL line per criterion in the terminal summary."""

import pytest

_OUTCOMES: dict[int, list[bool]] = {}
_DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _OUTCOMES.setdefault(n, []).append(rep.passed)


@pytest.fixture
def report(request):
    """Attach a measured value to the criterion line of the calling test."""
    n = request.node.get_closest_marker("criterion").args[0]

    def add(text: str) -> None:
        _DETAILS.setdefault(n, []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        ok = all(_OUTCOMES[n])
        detail = "; ".join(_DETAILS.get(n, []))
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
