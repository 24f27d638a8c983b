import numpy as np
import pytest

from noderf import autograd as ag


@pytest.fixture(autouse=True)
def fresh_graph():
    ag.reset_graph()
    yield
    ag.reset_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and return whether it passed."""

    def record(number: int, title: str, checks: dict) -> bool:
        ok = all(bool(v[0]) for v in checks.values())
        detail = "; ".join(f"{k}: {v[1]}" for k, v in checks.items())
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
