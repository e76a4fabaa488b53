import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m or (report.when != "call" and report.passed):
        return
    doc = (item.function.__doc__ or "").strip().splitlines()
    label = doc[0] if doc else item.name
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    prev = _CRITERIA.get(int(m.group(1)))
    if prev is None or prev[1] == "PASS":
        _CRITERIA[int(m.group(1))] = (label, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        label, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {label}")
