import time

import pytest

from qamw.codebooks import train_planar_lloyd

ACCEPTANCE_LINES = []


class CodebookLadder:
    """Joint codebooks trained once per session (seed 0, default sample size).
    ``seconds[B]`` records the training time for runtime checks."""

    def __init__(self, seed=0):
        self.seed = seed
        self._cache = {}
        self.seconds = {}

    def __getitem__(self, bits):
        if bits not in self._cache:
            t0 = time.perf_counter()
            self._cache[bits] = train_planar_lloyd(bits, seed=self.seed)
            self.seconds[bits] = time.perf_counter() - t0
        return self._cache[bits]


@pytest.fixture(scope="session")
def ladder():
    return CodebookLadder()


@pytest.fixture(scope="session")
def cb7(ladder):
    return ladder[7]


@pytest.fixture(scope="session")
def small_cb():
    """Fast 6-bit codebook for codec plumbing tests."""
    return train_planar_lloyd(6, seed=1)


@pytest.fixture
def acceptance():
    def record(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
