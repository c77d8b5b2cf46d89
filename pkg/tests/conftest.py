import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): gating acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["notes"].extend(str(v) for k, v in item.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] criterion {number}: {e['title']}"
        if e["notes"]:
            line += " | " + "; ".join(e["notes"])
        terminalreporter.write_line(line)
