import numpy as np
import pytest

from cvgan.dataset import WindowSet, toy_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """Three short normalized lifecycles at 64 features."""
    return toy_corpus(count=3, n=40, fpt_index=15, n_feature=64)


@pytest.fixture
def small_windows(small_corpus):
    return WindowSet(small_corpus, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
