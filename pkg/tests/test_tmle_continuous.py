import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from survey_tmle.data import BINARY, Dataset, SamplingFunction, WeightedSample
from survey_tmle.exceptions import InputError
from survey_tmle.oracles import grid_argmin, quadratic_argmin_slope, random_discrete_measure
from survey_tmle.rng import make_rng
from survey_tmle.sampling import make_plan, rejective_sample
from survey_tmle.simulation import PSI0_REFERENCE, DgpSpec, draw_raw, noncentrality, outcome_mean
from survey_tmle.tmle_continuous import (
    ContinuousTMLE,
    _evaluate,
    estimate_continuous,
    influence_c,
    max_loglik_step,
    psi_c_ratio,
    target_step_c,
)


def continuous_population(N, rng, beta=0.05):
    w = rng.normal(size=N)
    g0 = expit(-1 + 0.5 * w)
    a = np.where(rng.random(N) < g0, 0.0, 1 + 2 * rng.random(N))
    y = 0.3 + beta * a + 0.05 * w + 0.1 * rng.normal(size=N)
    return Dataset.from_arrays(w, a, y, rng.integers(1, 3, N), outcome_scale=(-0.5, 1.5))


def test_linear_q_gives_slope():
    rng = make_rng(1)
    a = rng.exponential(size=30)
    q0 = rng.random(30)
    assert psi_c_ratio(rng.random(30), a, q0 + 0.37 * a, q0) == pytest.approx(0.37, abs=1e-15)


def test_zero_exposure_rejected():
    with pytest.raises(InputError):
        psi_c_ratio(np.ones(3), np.zeros(3), np.ones(3), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ratio_is_quadratic_argmin(seed):
    m = random_discrete_measure(make_rng(seed), 2, 2)
    mass = (m["pw"][:, None] * m["pa"]).ravel()
    q0 = np.repeat(m["q"][:, :1], 3, axis=1).ravel()
    ref = quadratic_argmin_slope(mass, m["a"].ravel(), m["q"].ravel(), q0)
    assert psi_c_ratio(mass, m["a"].ravel(), m["q"].ravel(), q0) == pytest.approx(ref, abs=1e-10)


def test_influence_zero_at_reference_point():
    assert influence_c(0.0, 0.4, 0.4, 0.4, 1.0, 0.5, 0.2, 2.0) == 0.0


def test_influence_by_hand():
    assert influence_c(1.0, 0.7, 0.0, 0.0, 0.0, 0.5, 0.0, 1.0) == pytest.approx(0.7)


def test_influence_centred_under_truth():
    rng = make_rng(2)
    spec = DgpSpec(1)
    v, w, a, y = draw_raw(spec, 10**6, rng)
    w1, w2 = w[:, 0], w[:, 1]
    g0 = np.where((w1 >= 1.1) & (w2 >= 0.8), 0.8, 0.1)
    mu = (1 - g0) * (2 + noncentrality(w1, w2))
    zeta2 = float(np.mean(a * a))
    D = influence_c(a, y, outcome_mean(a, w1, w2), outcome_mean(0.0, w1, w2), mu, g0, PSI0_REFERENCE, zeta2)
    assert abs(D.mean()) < 3 * D.std() / np.sqrt(len(D))


def test_step_is_zero_at_stationarity():
    rng = make_rng(3)
    D = rng.normal(size=100)
    w = rng.random(100)
    D -= np.sum(w * D) / w.sum()
    t, at_bound = max_loglik_step(D, w, 0.99 / np.abs(D).max())
    assert abs(t) < 1e-12 and not at_bound


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_step_matches_grid(seed):
    rng = make_rng(seed)
    D = rng.standard_t(4, size=200) + rng.normal(0, 0.3)
    w = rng.uniform(0.5, 2, 200)
    w /= w.sum()
    bound = 0.99 / np.abs(D).max()
    t, _ = max_loglik_step(D, w, bound)
    ref = grid_argmin(lambda s: -float(np.sum(w * np.log1p(s * D))), -bound, bound)
    assert abs(t - ref) <= 1e-4


def test_step_bound_reported():
    t, at_bound = max_loglik_step(np.array([1.0, 2.0]), np.array([0.5, 0.5]), 0.4)
    assert t == 0.4 and at_bound


@pytest.fixture(scope="module")
def drawn():
    rng = make_rng(4)
    ds = continuous_population(50_000, rng)
    plan = make_plan(ds, SamplingFunction({1: 1.5, 2: 0.5}), 1500)
    return rejective_sample(plan, rng, dataset=ds)


def test_targeting_keeps_measure_valid(drawn):
    model = ContinuousTMLE(max_iter=5, mic=0.0, psi_tol=0.0).fit_sample(drawn)
    st_ = model.nuisance_
    assert len(st_.t_history) == 5
    assert np.all(st_.ratio_weights > 0)
    assert np.all(st_.cond > 0)
    np.testing.assert_allclose(st_.cond.sum(axis=1), 1.0, atol=1e-12)
    assert st_.w_model.sum() == pytest.approx(1.0, abs=1e-12)


def test_single_step_raises_likelihood(drawn):
    model = ContinuousTMLE(max_iter=0).fit_sample(drawn)
    state = model.nuisance_
    new, t, _ = target_step_c(state, drawn)
    assert np.sum(drawn.ht_weights * np.log(new.ratio_weights)) >= 0
    ev = _evaluate(new, drawn.a, drawn.y)
    assert np.isfinite(ev.psi)


def test_score_decreases_and_report_fields(drawn):
    r = ContinuousTMLE().fit_sample(drawn).report_
    assert r.converged
    assert abs(r.score_trace[-1]) <= abs(r.score_trace[0])
    assert r.extra["stop_reason"] in ("score", "psi")
    assert r.ci[0] < r.psi_star < r.ci[1]
    assert r.n == 1500 and r.N == 50_000
    assert r.gamma_n == pytest.approx(1 - r.extra["zeta2_0"] / r.extra["zeta2_star"])


def test_second_moment_matched_initially(drawn):
    r = ContinuousTMLE().fit_sample(drawn).report_
    assert r.extra["zeta2_initial"] == pytest.approx(r.extra["zeta2_0"], rel=1e-10)


def test_zero_influence_is_fixed_point():
    rng = make_rng(5)
    w = rng.normal(size=800)
    a = np.where(rng.random(800) < 0.3, 0.0, rng.exponential(size=800) + 0.5)
    r = ContinuousTMLE().fit(w, a, expit(0.2 + 0.5 * w)).report_
    assert r.iterations == 0
    assert r.psi_star == r.psi_initial


def test_linear_world_recovers_slope():
    rng = make_rng(6)
    ds = continuous_population(200_000, rng, beta=0.05)
    plan = make_plan(ds, SamplingFunction.uniform(ds.stratum_domain), 2000)
    est = np.array([estimate_continuous(rejective_sample(plan, rng, dataset=ds)).psi_star for _ in range(40)])
    assert abs(est.mean() - 0.05) < 3 * est.std(ddof=1) / np.sqrt(len(est)) + 1e-3


def test_mc_mode_close_to_exact(drawn):
    r = ContinuousTMLE(mc_mode=True, mc_B=200_000, random_state=7).fit_sample(drawn).report_
    assert r.psi_star == pytest.approx(r.extra["psi_exact"], abs=0.01)
    again = ContinuousTMLE(mc_mode=True, mc_B=200_000, random_state=7).fit_sample(drawn).report_
    assert again.psi_star == r.psi_star


@pytest.mark.parametrize("mode", ["outcome", "all"])
def test_stratified_fits(drawn, mode):
    r = ContinuousTMLE(stratify=mode).fit_sample(drawn).report_
    assert np.isfinite(r.psi_star) and r.sigma_n > 0


def test_input_errors(drawn):
    with pytest.raises(InputError):
        ContinuousTMLE(stratify="bogus").fit_sample(drawn)
    ds = Dataset.from_arrays(np.zeros(4), [0, 1, 1, 0], np.zeros(4), exposure_kind=BINARY)
    with pytest.raises(InputError):
        ContinuousTMLE().fit_sample(WeightedSample.full(ds))


def test_nuisance_dump_is_serialisable(drawn):
    import json

    model = ContinuousTMLE().fit_sample(drawn)
    json.dumps(model.nuisance_dump())
