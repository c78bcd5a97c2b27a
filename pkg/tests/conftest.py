import numpy as np
import pytest

from zeuslab.mdp import TabularMDP


def random_mdp(rng, n=None, a=None, gamma=None, sparsity=0.5):
    """Random valid tabular MDP; some transition entries zeroed for sparse rows."""
    n = n or int(rng.integers(2, 7))
    a = a or int(rng.integers(1, 4))
    gamma = rng.uniform(0.0, 0.95) if gamma is None else gamma
    P = rng.random((n, a, n))
    P[rng.random((n, a, n)) < sparsity] = 0.0
    for s in range(n):
        for b in range(a):
            if P[s, b].sum() == 0:
                P[s, b, rng.integers(n)] = 1.0
    P /= P.sum(axis=2, keepdims=True)
    return TabularMDP(P, rng.random((n, a)), gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_state_chain(gamma=0.5):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    return TabularMDP(P, np.array([[0.0], [1.0]]), gamma)


def absorbing_pair(r0=0.2, r1=0.5, gamma=0.9):
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = 1.0
    P[1, 0, 1] = 1.0
    return TabularMDP(P, np.array([[r0], [r1]]), gamma)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
