import pytest

from survey_tmle.exceptions import OracleFailure
from survey_tmle.oracles import (
    continuous_remainder_sides,
    random_discrete_measure,
    run_oracles,
    validate,
)
from survey_tmle.rng import make_rng


@pytest.fixture(scope="module")
def results():
    return run_oracles(seed=0, n_draws=30_000)


def test_all_oracles_pass(results):
    failed = [r for r in results if not r.passed]
    assert not failed, failed


def test_loose_tolerance_is_caught():
    with pytest.raises(OracleFailure, match="fluctuation"):
        validate(seed=0, fluctuation_tol=1e-1, n_draws=30_000)


def test_continuous_identity_sign():
    # the cross term enters with a minus sign; a plus sign breaks the identity
    rng = make_rng(1)
    gaps = []
    for _ in range(20):
        P = random_discrete_measure(rng, 3, 1)
        Pp = random_discrete_measure(rng, 3, 1)
        Pp["a"] = P["a"]
        left, right = continuous_remainder_sides(P, Pp)
        assert left == pytest.approx(right, abs=1e-10)
        left, right_plus = continuous_remainder_sides(P, Pp, cross_sign=1.0)
        gaps.append(abs(left - right_plus))
    assert min(gaps) > 1e-6
