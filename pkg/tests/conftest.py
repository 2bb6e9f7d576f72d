import numpy as np
import pytest
from scipy.special import expit

from survey_tmle.data import BINARY, Dataset
from survey_tmle.rng import make_rng


def binary_world(N, rng, effect=0.1):
    """Two discrete contexts, known ``g(1 | w)`` and an additive risk difference."""
    w = rng.integers(0, 2, N).astype(float)
    g1 = np.where(w == 1, 0.7, 0.3)
    a = (rng.random(N) < g1).astype(float)
    q = 0.3 + 0.2 * w + effect * a
    y = (rng.random(N) < q).astype(float)
    return w, a, y, g1


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def binary_dataset(rng):
    N = 20_000
    w = rng.normal(size=(N, 2))
    v = rng.integers(1, 4, N)
    a = (rng.random(N) < expit(0.3 * w[:, 0] - 0.2 * w[:, 1])).astype(float)
    y = (rng.random(N) < expit(-0.5 + 0.8 * a + 0.5 * w[:, 0] + 0.2 * v)).astype(float)
    return Dataset.from_arrays(w, a, y, v, exposure_kind=BINARY)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict = {}


def record_criterion(k: int, passed: bool, detail: str):
    line = f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
