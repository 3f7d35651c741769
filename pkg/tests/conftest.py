import numpy as np
import pytest

from forgetattack import data, ndcore


@pytest.fixture
def tiny_ds():
    return data.gen_blobs(60, 3, 3, 3.0, seed=1)


@pytest.fixture
def tiny_model():
    return ndcore.init_params((3, 5, 4, 3), seed=0)


def fd_grad(f, theta, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.abs(a - b).max() / (1.0 + np.abs(b).max()))


ACCEPTANCE_LINES: list = []


def record(criterion: int, ok: bool, detail: str) -> str:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
