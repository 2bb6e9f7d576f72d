import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import binary_world
from survey_tmle.data import BINARY, Dataset
from survey_tmle.design import asymptotic_variance, optimal_h, run_pilot, stratum_f2
from survey_tmle.exceptions import InputError
from survey_tmle.rng import make_rng
from survey_tmle.simulation import STUDY_ESTIMATOR, DgpSpec, draw_dataset

PROBS = {1: 0.2, 2: 0.3, 3: 0.5}
F2 = {1: 3.0, 2: 1.0, 3: 0.5}


def test_uniform_h_variance():
    assert asymptotic_variance(F2, PROBS, {1: 1, 2: 1, 3: 1}) == pytest.approx(0.2 * 9 + 0.3 + 0.5 * 0.25)


def test_optimal_h_attains_lower_bound():
    h, pi2 = optimal_h(F2, PROBS, floor=0.0)
    assert pi2 == pytest.approx(0.2 * 3 + 0.3 + 0.25)
    assert sum(PROBS[v] * h[v] for v in PROBS) == pytest.approx(1.0)
    assert asymptotic_variance(F2, PROBS, h) == pytest.approx(pi2**2)


def test_grid_search_over_mean_one_simplex():
    h_opt, _ = optimal_h(F2, PROBS, floor=0.0)
    best, best_h = np.inf, None
    step = 0.01
    for x1, x2 in itertools.product(np.arange(step, 1, step), repeat=2):
        x3 = 1 - x1 - x2  # x_v = P(v) h(v), a point of the simplex
        if x3 <= 0:
            continue
        h = {1: x1 / PROBS[1], 2: x2 / PROBS[2], 3: x3 / PROBS[3]}
        val = asymptotic_variance(F2, PROBS, h)
        if val < best:
            best, best_h = val, h
    for v in PROBS:
        assert best_h[v] == pytest.approx(h_opt[v], abs=step / PROBS[v])


@settings(max_examples=50, deadline=None)
@given(f=st.lists(st.floats(0.01, 100), min_size=3, max_size=3),
       h=st.lists(st.floats(0.05, 20), min_size=3, max_size=3))
def test_optimal_h_never_worse(f, h):
    f2 = dict(zip(PROBS, f))
    mean = sum(PROBS[v] * x for v, x in zip(PROBS, h))
    other = {v: x / mean for v, x in zip(PROBS, h)}
    h_opt, _ = optimal_h(f2, PROBS, floor=0.0)
    assert asymptotic_variance(f2, PROBS, h_opt) <= asymptotic_variance(f2, PROBS, other) * (1 + 1e-12)


def test_floor_and_renormalisation():
    h, _ = optimal_h({1: 100.0, 2: 1e-6}, {1: 0.5, 2: 0.5}, floor=0.05)
    assert h[2] > 0
    assert 0.5 * h[1] + 0.5 * h[2] == pytest.approx(1.0)


def test_bad_inputs():
    with pytest.raises(InputError):
        optimal_h({1: 0.0}, {1: 1.0})
    with pytest.raises(InputError):
        asymptotic_variance({1: 1.0}, {1: 1.0}, {1: 0.0})


def test_stratum_f2():
    f2, cnt = stratum_f2(np.array([1.0, -1.0, 2.0]), np.array([0, 0, 1]), 3)
    np.testing.assert_allclose(f2[:2], [1.0, 2.0])
    assert np.isnan(f2[2]) and cnt.tolist() == [2, 1, 0]


def test_homoscedastic_strata_give_uniform_h():
    rng = make_rng(1)
    N = 100_000
    w, a, y, _ = binary_world(N, rng)
    ds = Dataset.from_arrays(w, a, y, rng.integers(1, 4, N), exposure_kind=BINARY)
    res = run_pilot(ds, 6000, rng=make_rng(2))
    for v in ds.stratum_domain:
        assert res.h_opt.values[v] == pytest.approx(1.0, abs=0.1)
    assert res.pilot_indices.size == 6000


def test_absent_stratum_is_imputed(caplog):
    rng = make_rng(3)
    N = 20_000
    w, a, y, _ = binary_world(N, rng)
    v = np.ones(N, dtype=int)
    v[:3] = 2  # almost surely missed by the pilot
    ds = Dataset.from_arrays(w, a, y, v, exposure_kind=BINARY)
    res = run_pilot(ds, 500, rng=make_rng(4))
    assert res.imputed_strata == (2,)
    assert "absent" in caplog.text


def test_pilot_j2_matches_reported_h():
    hs = []
    for b in range(5):
        ds = draw_dataset(DgpSpec(2), 200_000, make_rng(5, b, 0))
        hs.append(run_pilot(ds, 1000, rng=make_rng(5, b, 2), estimator_params=STUDY_ESTIMATOR).h_opt.values)
    med = {v: float(np.median([h[v] for h in hs])) for v in (1, 2, 3)}
    for v, ref in zip((1, 2, 3), (0.30, 0.60, 1.50)):
        assert med[v] == pytest.approx(ref, rel=0.3)
