import numpy as np
import pytest
from hypothesis import settings

from wclab.data import Dataset
from wclab.model import Activation, ThreeLayerParams, TwoLayerParams
from wclab.risk import RiskContext

settings.register_profile("wclab", deadline=None, max_examples=40)
settings.load_profile("wclab")


def make_dataset(rng, N, d, scale=1.0):
    X = scale * rng.standard_normal((N, d))
    y = np.where(rng.random(N) < 0.5, -1.0, 1.0)
    return Dataset(X, y)


def make_two_layer(rng, M, d, c=0.5, trained=True, a_scale=1.0, v_scale=1.0):
    return TwoLayerParams(a_scale * rng.standard_normal((M, d)), v_scale * rng.standard_normal(M), c, trained)


def make_three_layer(rng, M1, M2, d, c=0.5):
    return ThreeLayerParams(rng.standard_normal((M1, d)), rng.standard_normal((M2, M1)),
                            rng.standard_normal(M2), c)


def make_ctx(rng, N, d, activation="sigmoid"):
    return RiskContext(make_dataset(rng, N, d), activation=Activation(activation))


def central_diff(fn, w, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    g = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (fn(w + e) - fn(w - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed at the end of every run.
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
