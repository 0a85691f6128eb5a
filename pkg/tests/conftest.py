import numpy as np
import pytest

from adamshap.model import ModelSpec
from adamshap.numerics import Rng


def random_instance(seed, batch=5, dims=None, activation=None, loss=None, bias=None):
    """A random (spec, params, X, y) tuple drawn from a keyed stream."""
    rng = Rng(seed)
    r = rng.uniform(8)
    if dims is None:
        depth = 1 + int(r[0] * 3)
        dims = [2 + int(r[1 + l] * 5) for l in range(depth + 1)]
    activation = activation or ("relu", "tanh", "identity")[int(r[5] * 3)]
    loss = loss or ("softmax_cross_entropy", "mse")[int(r[6] * 2)]
    if bias is None:
        bias = bool(r[7] < 0.7)
    spec = ModelSpec(tuple(dims), activation, loss, bias)
    theta = spec.init_params(rng.child(1)) + 0.1 * rng.child(2).gaussian(spec.n_params)
    X = rng.child(3).gaussian((batch, dims[0]))
    if loss == "mse":
        y = rng.child(4).gaussian((batch, dims[-1]))
    else:
        y = np.floor(rng.child(4).uniform(batch) * dims[-1]).astype(int)
    return spec, theta, X, y


@pytest.fixture
def instance():
    return random_instance


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
