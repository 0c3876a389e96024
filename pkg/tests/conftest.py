import re
import time

import pytest

_CRITERIA = {}  # number -> [passed, seconds, details]
_NAME = re.compile(r"test_c(\d+)_")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("call_seconds", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    m = _NAME.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    slot = _CRITERIA.setdefault(int(m.group(1)), [True, 0.0, []])
    slot[0] = slot[0] and report.passed
    props = report.user_properties
    slot[1] += sum(v for k, v in props if k == "call_seconds")
    slot[2].extend(v for k, v in props if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, seconds, details = _CRITERIA[number]
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  ({seconds:.1f}s in test body)"
        terminalreporter.write_line("  ".join([line] + details))


@pytest.fixture
def detail(record_property):
    """Attach a short measurement to the criterion's summary line."""
    return lambda text: record_property("detail", text)
