import numpy as np
import pytest
from hypothesis import strategies as st

from mvmr_weakiv import MultivariableSummary


def random_spd(rng, n, scale=1.0, jitter=0.5):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + jitter * np.eye(n))


def random_summary(rng, J=4, K=2, n_X=5000.0, n_Y=5000.0, strength=1.0, noise=0.1):
    """A valid summary with Sigma_gamma built from per-exposure SPD blocks."""
    gamma = strength * rng.standard_normal((J, K))
    theta = rng.standard_normal(K)
    Gamma = gamma @ theta + noise * rng.standard_normal(J)
    L = np.linalg.cholesky(random_spd(rng, J * K, scale=0.2))
    return MultivariableSummary(
        Gamma_hat=Gamma,
        gamma_hat=gamma,
        Sigma_Gamma=random_spd(rng, J),
        Sigma_gamma=L @ L.T,
        n_X=n_X,
        n_Y=n_Y,
    )


@st.composite
def summaries(draw, J=None, K=None):
    seed = draw(st.integers(0, 2**32 - 1))
    K = draw(st.integers(1, 3)) if K is None else K
    J = draw(st.integers(K, K + 4)) if J is None else J
    rng = np.random.default_rng(seed)
    return random_summary(rng, J, K, n_X=draw(st.sampled_from([1000.0, 5000.0])), n_Y=5000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture
def summary(rng):
    return random_summary(rng)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
