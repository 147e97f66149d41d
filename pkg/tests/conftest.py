import numpy as np
import pytest

ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    """Record ``(criterion number, title, passed, detail)`` for the summary."""
    def rec(num, title, passed, detail=""):
        ACCEPTANCE[num] = (title, bool(passed), detail)
        print(f"criterion {num} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
    return rec


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        tr.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
