import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for the acceptance summary."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number, title, ok, detail):
        line = f"acceptance {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        lines.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
