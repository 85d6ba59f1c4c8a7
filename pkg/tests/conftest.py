"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""
from __future__ import annotations

import pytest

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n = mark.args[0]
    entry = CRITERIA.setdefault(n, {"title": mark.args[1], "details": [], "passed": True})
    entry["passed"] = entry["passed"] and rep.passed
    detail = getattr(item, "criterion_detail", "")
    if detail:
        # parametrized criteria contribute one fragment per case
        entry["details"].append(detail)
    status = "PASS" if rep.passed else "FAIL"
    # the line also goes to the captured output of the test itself
    rep.sections.append(("criterion", f"criterion {n} ({mark.args[1]}): {status} {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['title']}: {'; '.join(e['details'])}")
