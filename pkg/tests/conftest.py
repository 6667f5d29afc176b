import numpy as np
import pytest

from mmdit_adapter.gradcheck import tiny_config
from mmdit_adapter.mmdit import MMDiT


def central_diff(f, x: np.ndarray, u: np.ndarray, eps: float = 1e-3) -> float:
    return (f(x + eps * u) - f(x - eps * u)) / (2 * eps)


def rel_err(a, b) -> float:
    a, b = float(a), float(b)
    if abs(a) < 1e-10 and abs(b) < 1e-10:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return MMDiT(tiny_config(0))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
