"""Independent reference computations and the validation battery.

Each oracle recomputes a quantity by a different route from the library
code (enumeration, closed-form least squares, grid search) on small built-in
instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from .data import Dataset, SamplingFunction, ht_integral
from .exceptions import OracleFailure
from .rng import make_rng
from .sampling import exact_rejective_design, make_plan, pareto_sample, plan_from_probabilities, rejective_sample
from .tmle_binary import fluctuate_binary
from .tmle_continuous import max_loglik_step, psi_c_ratio


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------- sampling


def subset_frequency_test(draw, design, n_draws):
    """Chi-square goodness of fit of drawn subsets against ``design``.

    ``draw()`` returns one subset as an index array; ``design`` is the list of
    ``(subset, probability)`` pairs from enumeration.
    """
    index = {s: k for k, (s, _) in enumerate(design)}
    counts = np.zeros(len(design))
    for _ in range(n_draws):
        counts[index[tuple(int(i) for i in draw())]] += 1
    expected = n_draws * np.array([p for _, p in design])
    return float(stats.chisquare(counts, expected).pvalue), counts


def rejective_design_check(p, n, n_draws, seed):
    design, pi = exact_rejective_design(p, n)
    plan = plan_from_probabilities(p, n)
    rng = make_rng(seed, 101)
    pval, _ = subset_frequency_test(lambda: rejective_sample(plan, rng), design, n_draws)
    total = sum(pr for _, pr in design)
    return pval, abs(total - 1.0), abs(pi.sum() - n)


# ------------------------------------------------------- psi_c / quadratic


def quadratic_argmin_slope(weights, a, q_a, q_0) -> float:
    """Slope minimising ``sum w (Q(a) - Q(0) - beta a)^2`` by weighted least squares."""
    sw = np.sqrt(np.asarray(weights, dtype=float))
    X = (sw * np.asarray(a, dtype=float))[:, None]
    target = sw * (np.asarray(q_a) - np.asarray(q_0))
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    return float(beta[0])


def random_discrete_measure(rng, n_w=3, n_a=2):
    """Probability measure on ``n_w`` contexts times exposures ``{0} + n_a`` nonzero atoms.

    Returns a dict with context masses ``pw``, exposure atoms ``a`` (column 0
    is the zero atom), conditional masses ``pa`` and outcome regression ``q``.
    """
    pw = rng.dirichlet(np.ones(n_w))
    a = np.zeros((n_w, n_a + 1))
    a[:, 1:] = rng.uniform(0.2, 2.0, size=(n_w, n_a))
    pa = rng.dirichlet(np.ones(n_a + 1), size=n_w)
    pa[:, 0] = np.maximum(pa[:, 0], 0.05)
    pa /= pa.sum(axis=1, keepdims=True)
    q = rng.uniform(0.05, 0.95, size=(n_w, n_a + 1))
    return {"pw": pw, "a": a, "pa": pa, "q": q}


def measure_psi_c(m) -> float:
    mass = m["pw"][:, None] * m["pa"]
    return psi_c_ratio(mass, m["a"], m["q"], m["q"][:, [0]])


def psi_c_oracle_check(n_measures, seed):
    rng = make_rng(seed, 102)
    worst = 0.0
    for _ in range(n_measures):
        m = random_discrete_measure(rng, rng.integers(1, 4), rng.integers(1, 4))
        mass = (m["pw"][:, None] * m["pa"]).ravel()
        q0 = np.repeat(m["q"][:, :1], m["q"].shape[1], axis=1).ravel()
        ref = quadratic_argmin_slope(mass, m["a"].ravel(), m["q"].ravel(), q0)
        worst = max(worst, abs(measure_psi_c(m) - ref))
    return worst


# -------------------------------------------------------------- remainders


def random_binary_measure(rng, n_w=3):
    """Contexts with masses ``pw``, ``g1 = g(1 | w)`` and ``q[:, a] = Q(a, w)``."""
    return {
        "pw": rng.dirichlet(np.ones(n_w)),
        "g1": rng.uniform(0.1, 0.9, n_w),
        "q": rng.uniform(0.05, 0.95, (n_w, 2)),
    }


def binary_remainder_sides(P, Pp):
    """Both sides of the binary second-order identity for measures sharing the context atoms.

    Left: ``Psi(P') - Psi(P) - (P' - P) D(P)``, with ``Y`` integrated out.
    Right: ``P' (2A - 1)(Q' - Q)(1/g' - 1/g)``.
    """
    def psi(M):
        return float(M["pw"] @ (M["q"][:, 1] - M["q"][:, 0]))

    def mean_D(M, at):
        # E_M D(at), with E_M[Y | a, w] = Q_M(a, w)
        ga_at = np.column_stack([1 - at["g1"], at["g1"]])
        ga_m = np.column_stack([1 - M["g1"], M["g1"]])
        sign = np.array([-1.0, 1.0])
        d1 = at["q"][:, 1] - at["q"][:, 0] - psi(at)
        d2 = ((M["q"] - at["q"]) * sign / ga_at * ga_m).sum(axis=1)
        return float(M["pw"] @ (d1 + d2))

    left = psi(Pp) - psi(P) - (mean_D(Pp, P) - mean_D(P, P))
    gp = np.column_stack([1 - Pp["g1"], Pp["g1"]])
    g = np.column_stack([1 - P["g1"], P["g1"]])
    sign = np.array([-1.0, 1.0])
    right = float(Pp["pw"] @ (gp * sign * (Pp["q"] - P["q"]) * (1 / gp - 1 / g)).sum(axis=1))
    return left, right


def continuous_remainder_sides(P, Pp, cross_sign=-1.0):
    """Both sides of the continuous second-order identity.

    Measures share context and exposure atoms (a common grid). The right side
    is ``(1 - z'/z)(psi' - psi) - (1/z) P'[(Q'(0) - Q(0))(mu' - mu g'(0)/g(0))]``
    with ``z`` the second moment of the exposure; ``cross_sign`` replaces the
    minus in front of the cross term (used to show the other sign fails).
    """
    a = P["a"]

    def parts(M):
        mass = M["pw"][:, None] * M["pa"]
        zeta2 = float(np.sum(mass * a * a))
        mu = np.sum(M["pa"] * a, axis=1)
        return measure_psi_c(M), zeta2, mu, M["pa"][:, 0]

    psi, z, mu, g0 = parts(P)
    psi_p, z_p, mu_p, g0_p = parts(Pp)

    def mean_D(M):
        # E_M D(P), Y integrated out under M
        q0 = P["q"][:, [0]]
        d1 = a * (P["q"] - q0 - a * psi) / z
        clever = a.copy()
        clever[:, 0] = -mu / g0
        d2 = (M["q"] - P["q"]) * clever / z
        return float(np.sum(M["pw"][:, None] * M["pa"] * (d1 + d2)))

    left = psi_p - psi - (mean_D(Pp) - mean_D(P))
    dq0 = Pp["q"][:, 0] - P["q"][:, 0]
    right = (1 - z_p / z) * (psi_p - psi) + cross_sign * float(Pp["pw"] @ (dq0 * (mu_p - mu * g0_p / g0))) / z
    return left, right


def remainder_check(kind, n_pairs, seed):
    rng = make_rng(seed, 103 if kind == "binary" else 104)
    worst = 0.0
    for _ in range(n_pairs):
        if kind == "binary":
            # 3 contexts x 2 exposure levels = 6 atoms
            P, Pp = random_binary_measure(rng, 3), random_binary_measure(rng, 3)
            left, right = binary_remainder_sides(P, Pp)
        else:
            # 3 contexts x (zero + one nonzero exposure) = 6 atoms
            P = random_discrete_measure(rng, 3, 1)
            Pp = random_discrete_measure(rng, 3, 1)
            Pp["a"] = P["a"]
            left, right = continuous_remainder_sides(P, Pp)
        worst = max(worst, abs(left - right))
    return worst


# ------------------------------------------------------------ grid oracles


def grid_argmin(fun, lo, hi, coarse=1e-2, fine=1e-5, window=0.02):
    """Two-stage grid search: coarse over ``[lo, hi]``, then fine around the best point."""
    g = np.unique(np.clip(np.arange(lo, hi + coarse / 2, coarse), lo, hi))
    best = g[int(np.argmin([fun(t) for t in g]))]
    a, b = max(lo, best - window), min(hi, best + window)
    g = np.unique(np.clip(np.arange(a, b + fine / 2, fine), a, b))
    vals = np.array([fun(t) for t in g])
    return float(g[int(np.argmin(vals))])


def binary_fluctuation_instance(rng, n=200):
    w = rng.normal(size=n)
    g1 = np.clip(expit(0.5 * w), 0.01, 0.99)
    a = (rng.random(n) < g1).astype(float)
    y = (rng.random(n) < expit(-0.3 + 0.8 * a + w)).astype(float)
    q_init = np.where(a == 1, expit(0.2 + 0.5 * w), expit(-0.5 + 0.5 * w))
    cov = np.where(a == 1, 1 / g1, -1 / (1 - g1))
    weights = rng.uniform(0.5, 2.0, n)
    weights /= weights.sum()
    return logit(q_init), cov, y, weights


def weighted_logistic_risk(t, logit_q, cov, y, weights):
    eta = logit_q + t * cov
    return float(np.sum(weights * (np.logaddexp(0.0, eta) - y * eta)))


def fluctuation_oracle_check(seed, tol=1e-12, n_instances=3):
    rng = make_rng(seed, 105)
    worst = 0.0
    for _ in range(n_instances):
        inst = binary_fluctuation_instance(rng)
        t, _ = fluctuate_binary(*inst, tol=tol)
        ref = grid_argmin(lambda s: weighted_logistic_risk(s, *inst), -3.0, 3.0)
        worst = max(worst, abs(t - ref))
    return worst


def target_step_oracle_check(seed, n_instances=3):
    rng = make_rng(seed, 106)
    worst = 0.0
    for _ in range(n_instances):
        D = rng.standard_t(4, size=300)
        D -= 0.3 * D.mean() - 0.05
        w = rng.uniform(0.5, 2.0, 300)
        w /= w.sum()
        bound = 0.99 / np.abs(D).max()
        t, _ = max_loglik_step(D, w, bound)
        ref = grid_argmin(lambda s: -float(np.sum(w * np.log1p(s * D))), -bound, bound)
        worst = max(worst, abs(t - ref))
    return worst


# ------------------------------------------------------------------ HT mass


def ht_mass_check(seed, n_draws=200):
    rng = make_rng(seed, 107)
    N = 1000
    ds = Dataset.from_arrays(rng.normal(size=(N, 1)), rng.random(N), rng.random(N), rng.integers(0, 3, N))
    plan = make_plan(ds, SamplingFunction.uniform(ds.stratum_domain), 50)
    worst = 0.0
    for _ in range(n_draws):
        sample = rejective_sample(plan, rng, dataset=ds)
        worst = max(worst, abs(ht_integral(sample, 1.0) - 1.0))
    return worst


# ----------------------------------------------------------------- battery


def run_oracles(seed: int = 0, fluctuation_tol: float = 1e-12, n_draws: int = 100_000) -> list[OracleResult]:
    """Run every oracle; ``fluctuation_tol`` exists to inject a negative control."""
    out = []

    p6 = np.array([0.9, 0.7, 0.5, 0.4, 0.3, 0.2])
    p6 = p6 * 3 / p6.sum()
    pval, mass_err, pi_err = rejective_design_check(p6, 3, n_draws, seed)
    out.append(OracleResult("rejective frequencies vs enumeration (N=6, n=3)", pval > 1e-3,
                            f"chi-square p = {pval:.4g}"))
    out.append(OracleResult("enumerated design sums", mass_err < 1e-12 and pi_err < 1e-10,
                            f"|sum P - 1| = {mass_err:.2e}, |sum pi - n| = {pi_err:.2e}"))

    design, _ = exact_rejective_design(np.full(5, 0.4), 2)
    plan = plan_from_probabilities(np.full(5, 0.4), 2)
    rng = make_rng(seed, 108)
    pval, _ = subset_frequency_test(lambda: pareto_sample(plan, rng), design, n_draws // 5)
    out.append(OracleResult("Pareto equal-p subsets uniform (N=5, n=2)", pval > 1e-3, f"chi-square p = {pval:.4g}"))

    err = ht_mass_check(seed)
    out.append(OracleResult("HT mass is 1 under uniform h", err <= 1e-12, f"max error {err:.2e}"))

    err = psi_c_oracle_check(100, seed)
    out.append(OracleResult("ratio form vs quadratic argmin", err <= 1e-10, f"max error {err:.2e}"))

    err = remainder_check("binary", 100, seed)
    out.append(OracleResult("binary remainder identity", err <= 1e-10, f"max error {err:.2e}"))

    err = remainder_check("continuous", 100, seed)
    out.append(OracleResult("continuous remainder identity", err <= 1e-10, f"max error {err:.2e}"))

    err = fluctuation_oracle_check(seed, tol=fluctuation_tol)
    out.append(OracleResult("binary fluctuation vs grid search", err <= 1e-4, f"max |t - t_grid| = {err:.2e}"))

    err = target_step_oracle_check(seed)
    out.append(OracleResult("density-ratio step vs grid search", err <= 1e-4, f"max |t - t_grid| = {err:.2e}"))
    return out


def validate(seed: int = 0, fluctuation_tol: float = 1e-12, n_draws: int = 100_000) -> list[OracleResult]:
    """Run the battery and raise :class:`OracleFailure` listing any failed check."""
    results = run_oracles(seed, fluctuation_tol, n_draws)
    failed = [r for r in results if not r.passed]
    if failed:
        err = OracleFailure("; ".join(f"{r.name}: {r.detail}" for r in failed))
        err.results = results
        raise err
    return results

