import numpy as np
import pytest

from tdformer.tensor import Node, set_precision


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64():
    set_precision(64)
    yield
    set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _gradient_error(op, arrays, h=1e-4, seed=0):
    """Largest relative gap between autodiff and central differences of sum(op(...) * R)."""
    nodes = [Node(a.copy(), requires_grad=True) for a in arrays]
    out = op(*nodes)
    weights = np.asarray(np.random.default_rng(seed).standard_normal(out.shape))
    out.backward(weights)

    def objective(values):
        return float(np.sum(op(*[Node(v) for v in values]).values * weights))

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric[idx] = (objective(plus) - objective(minus)) / (2 * h)
        analytic = nodes[i].grad
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return worst


@pytest.fixture
def gradient_error():
    return _gradient_error
