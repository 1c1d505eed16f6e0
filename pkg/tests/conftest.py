import time

import pytest

_criteria: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion implemented by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    cid, title = mark.args
    entry = _criteria.setdefault(cid, [title, True, 0.0, ""])
    if rep.when == "call":
        entry[2] += rep.duration
    if rep.failed:
        entry[1] = False
        if rep.longrepr is not None and not entry[3]:
            entry[3] = str(getattr(rep.longrepr, "reprcrash", None) and rep.longrepr.reprcrash.message or "")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: (len(c), c)):
        title, ok, secs, why = _criteria[cid]
        line = f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)"
        if not ok and why:
            line += f"  -- {why.splitlines()[0][:160]}"
        terminalreporter.write_line(line)


@pytest.fixture
def stopwatch():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
