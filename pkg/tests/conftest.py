"""Acceptance summary: one PASS/FAIL line per criterion at the end of the session.

Acceptance tests carry ``@pytest.mark.criterion(n, "title")``; a criterion
passes only when every test tagged with it passes. Tests may attach a short
measurement with ``record_property("detail", ...)``.
"""

import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _results.setdefault(n, {"title": title, "ok": True, "seen": False, "details": []})
    if rep.when == "call" or rep.failed:
        entry["seen"] = True
        if rep.failed or rep.skipped:
            entry["ok"] = False
    if rep.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        detail = f" ({'; '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"[PRIMARY] criterion {n:2d} {status}: {e['title']}{detail}")
