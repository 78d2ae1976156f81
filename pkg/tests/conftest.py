import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria: one summary line each, derived from test outcomes


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    num, title = marker.args
    entry = acceptance_log.entry(num, title)
    entry["title"] = title
    entry["total"] += 1
    if rep.failed:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    crit = acceptance_log.criteria
    if not crit:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(crit):
        e = crit[num]
        status = "FAIL" if e["failed"] else "PASS"
        line = f"criterion {num}: {status}  {e['title']}  ({e['total'] - len(e['failed'])}/{e['total']} checks)"
        tr.write_line(line)
        for name in e["failed"]:
            tr.write_line(f"    failed: {name}")
        for text in e["notes"]:
            tr.write_line(f"    {text}")
