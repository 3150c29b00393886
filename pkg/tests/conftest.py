import warnings

import pytest
from hypothesis import settings

settings.register_profile("qiee", max_examples=60, deadline=None)
settings.load_profile("qiee")


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


_VERDICTS: dict = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(criterion: int, title: str, checks):
        ok = all(c[1] for c in checks)
        failed = [f"{name} ({detail})" for name, good, detail in checks if not good]
        _VERDICTS[criterion] = (title, ok, "; ".join(failed) if failed else f"{len(checks)} checks")
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}")
        for name, good, detail in checks:
            print(f"  [{'ok' if good else 'FAIL'}] {name}: {detail}")
        return ok, failed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[k]
        terminalreporter.write_line(f"criterion {k:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
