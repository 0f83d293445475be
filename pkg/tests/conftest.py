import numpy as np
import pytest

from ncsgame.discretization import PlantSpec
from ncsgame.network import NetworkSpec
from ncsgame.scenarios import builtin_generic, builtin_lfc

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")


@pytest.fixture(scope="session")
def generic():
    return builtin_generic()


@pytest.fixture(scope="session")
def lfc():
    return builtin_lfc()


def tiny_plant(p=2, N=3, M=1, K=1, T=0.1, seed=0, a=-0.5):
    """Scalar-ish plant used by the moment and solver tests."""
    rng = np.random.default_rng(seed)
    A = a * np.eye(M) + 0.1 * rng.standard_normal((M, M))
    B = [rng.standard_normal((M, K)) for _ in range(p)]
    return PlantSpec(A=A, B=B, T=T, N=N, Q_N=np.eye(M), Q_1=np.eye(M),
                     R=[np.eye(K) * (1.0 + 0.5 * i) for i in range(p)], x0=np.ones(M))


def certain_network(p, alpha=0.0, mode="perfect"):
    return NetworkSpec.homogeneous(p, 1.0, alpha, mode)


def random_values(d, rng, scale=1.0):
    X = rng.standard_normal((d, d))
    return scale * (X @ X.T + np.eye(d))
