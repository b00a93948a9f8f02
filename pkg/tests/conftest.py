import numpy as np
import pytest

from pezlab.embedding import EmbeddingTable, gen_table


@pytest.fixture
def identity2():
    return EmbeddingTable(("a", "b"), np.eye(2))


@pytest.fixture
def cross4():
    return EmbeddingTable(("e", "n", "w", "s"), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]))


@pytest.fixture
def small_table():
    return gen_table(16, 8, 3)


class StubRng:
    """Stands in for a Generator when a test needs to force sampled rows."""

    def __init__(self, forced):
        self.forced = np.asarray(forced, dtype=np.int64)

    def integers(self, low, high, size=None):
        return self.forced[:size]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
