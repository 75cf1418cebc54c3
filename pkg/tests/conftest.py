"""Acceptance reporting: one PASS/FAIL line per criterion at the end of the run.

Tests opt in with ``@pytest.mark.criterion(n, "title")``.  A criterion
passes only if every test carrying its number passed.
"""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _results.setdefault(n, {"title": title, "ok": True, "tests": [], "notes": []})
    if rep.when == "call":
        entry["tests"].append(item.name)
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False
    for key, value in item.user_properties:
        if key == "detail" and rep.when == "call":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        status = "PASS" if r["ok"] and r["tests"] else "FAIL"
        detail = "; ".join(r["notes"])
        terminalreporter.write_line(f"criterion {n} {status}: {r['title']}" + (f" ({detail})" if detail else ""))
