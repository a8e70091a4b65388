import numpy as np
import pytest

# one line per acceptance criterion, printed after the test summary so the
# verdicts survive pytest's output capture
_criterion_lines = {}


def record_criterion(index: int, name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    line = f"criterion {index:2d} {status}  {name}"
    if detail:
        line += f"  [{detail}]"
    _criterion_lines[index] = line


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for idx in sorted(_criterion_lines):
            terminalreporter.write_line(_criterion_lines[idx])


@pytest.fixture
def rng():
    return np.random.default_rng(42)
