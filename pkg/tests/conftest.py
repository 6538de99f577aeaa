import numpy as np
import pytest

from projuq.linalg import MatrixHandle


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def spd_dense(n, rng, cond=None):
    """Random dense SPD matrix; with ``cond`` the eigenvalues span ``[1, cond]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.geomspace(1.0, cond, n) if cond else rng.uniform(0.5, 5.0, n)
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T)


def spd_handle(n, rng, cond=None):
    return MatrixHandle.from_dense(spd_dense(n, rng, cond))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
