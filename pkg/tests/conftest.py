import numpy as np
import pytest

from permiv.model import IVData


def make_data(rng, n=20, k=2, d=1, p=1, strength=1.0, hetero=False):
    """Random linear IV data with an intercept in X and theta = 0."""
    W = rng.standard_normal((n, k))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    u = rng.standard_normal(n)
    if hetero:
        u = u * (1.0 + np.abs(W[:, 0]))
    V = 0.5 * u[:, None] + rng.standard_normal((n, d))
    Y = W @ (strength * np.ones((k, d))) + X @ rng.standard_normal((p, d)) + V
    y = X @ rng.standard_normal(p) + u
    return IVData.from_arrays(y, Y, X, W)


def arrays(data):
    return data.y, data.Y, data.X, data.W


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
