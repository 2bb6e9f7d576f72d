"""Iterative TMLE of the continuous-exposure variable importance.

The parameter is the slope ``beta`` minimising
``E[(Q(A, W) - Q(0, W) - beta A)^2]``, equal to
``E[A (Q(A, W) - Q(0, W))] / E[A^2]``.

The working measure ``P^k`` lives on a finite support: the sampled contexts
``W_i`` (masses starting at the normalised HT weights) and, for each of them,
a zero atom with mass ``g(0 | W_i)`` plus ``J`` nonzero exposure atoms
``m_i + s e_j`` sharing the rest. The ``e_j`` are centred weighted quantiles
of the observed nonzero-exposure residuals and ``s`` is set so that the second
moment of ``A`` under ``P^0`` equals its HT estimate. Each targeting step
multiplies the density by ``1 + t D(P^k)`` and propagates the change exactly
to the context masses, the conditional exposure law and ``Q``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import CONTINUOUS, WeightedSample, sample_from_arrays
from .exceptions import EstimationError, InputError
from .glm import (
    G_MIN,
    Nuisance,
    context_matrix,
    stratified_context,
    fit_g0_continuous,
    fit_mu,
    fit_Q,
    fit_sigma2,
)
from .report import TmleReport, confidence_interval, normal_quantile
from .rng import as_generator

logger = logging.getLogger(__name__)

_Q_EPS = 1e-9
_STEP_MARGIN = 0.99
_GAMMA_GUARD = 1e-6
# influence values below this (on the unit outcome scale) are rounding noise
_D_FLOOR = 1e-12
STRATIFY_MODES = ("none", "outcome", "all")


def psi_c_ratio(weights, a, q_a, q_0) -> float:
    """``sum w a (Q(a, w) - Q(0, w)) / sum w a^2`` over weighted atoms."""
    weights = np.asarray(weights, dtype=float)
    a = np.asarray(a, dtype=float)
    zeta2 = float(np.sum(weights * a * a))
    if not zeta2 > 0:
        raise InputError("second moment of the exposure must be positive")
    return float(np.sum(weights * a * (np.asarray(q_a) - np.asarray(q_0))) / zeta2)


def influence_c_parts(a, y, q_a, q_0, mu, g0, psi, zeta2):
    """The two terms ``(D1, D2)`` of the influence curve at ``(a, y)``."""
    a = np.asarray(a, dtype=float)
    d1 = a * (np.asarray(q_a) - np.asarray(q_0) - a * psi) / zeta2
    clever = np.where(a == 0, -np.asarray(mu, dtype=float) / np.asarray(g0, dtype=float), a)
    d2 = (np.asarray(y) - np.asarray(q_a)) * clever / zeta2
    return d1, d2


def influence_c(a, y, q_a, q_0, mu, g0, psi, zeta2):
    """Influence curve ``D1 + D2``.

    ``zeta2 D1 = a (Q(a, w) - Q(0, w) - a psi)`` and
    ``zeta2 D2 = (y - Q(a, w)) (a - mu(w) 1{a = 0} / g(0 | w))``.
    """
    d1, d2 = influence_c_parts(a, y, q_a, q_0, mu, g0, psi, zeta2)
    return d1 + d2


def _weighted_quantiles(x, w, levels):
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cdf = (np.cumsum(ws) - 0.5 * ws) / ws.sum()
    return np.interp(levels, cdf, xs)


def max_loglik_step(D, weights, bound, tol=1e-13, max_iter=200):
    """``argmax_{|t| <= bound} sum w log(1 + t D)`` by safeguarded Newton.

    Returns ``(t, at_bound)``; the objective is strictly concave unless
    ``D`` vanishes on every positively weighted unit, in which case ``t = 0``.
    """
    D = np.asarray(D, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not np.any(D[w > 0] != 0):
        return 0.0, False

    def slope(t):
        return float(np.sum(w * D / (1.0 + t * D)))

    lo, hi = -bound, bound
    s_hi, s_lo = slope(hi), slope(lo)
    if s_hi >= 0:
        return hi, True
    if s_lo <= 0:
        return lo, True
    scale = float(np.sum(w * np.abs(D)))
    t = 0.0
    for _ in range(max_iter):
        r = 1.0 + t * D
        s = float(np.sum(w * D / r))
        if abs(s) <= tol * scale:
            break
        if s > 0:
            lo = t
        else:
            hi = t
        curv = float(np.sum(w * (D / r) ** 2))
        t_new = t + s / curv if curv > 0 else 0.5 * (lo + hi)
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(t)):
            t = t_new
            break
        t = t_new
    return t, False


@dataclass(frozen=True)
class ContinuousNuisance:
    """State of the working measure ``P^k``.

    Rows index sampled units (equivalently the context atoms); column 0 of
    the grid arrays is the zero-exposure atom.

    Attributes
    ----------
    atoms, cond : ndarray (n, J + 1)
        Exposure atoms and their conditional masses given ``W_i``.
    w_model : ndarray (n,)
        Context masses (sum to 1).
    Qg, Qo : ndarray
        ``Q`` on the grid and at the observed ``(A_i, W_i)``.
    s2g, s2o : ndarray
        Conditional outcome variance on the grid and at the observations.
    ratio_weights : ndarray (n,)
        ``prod_k (1 + t_k D(P^k)(O_i))`` at the observations.
    """

    Q: Nuisance
    mu: Nuisance
    g0: Nuisance
    sigma2: Nuisance
    zeta2_0: float
    atoms: np.ndarray
    cond: np.ndarray
    w_model: np.ndarray
    Qg: np.ndarray
    Qo: np.ndarray
    s2g: np.ndarray
    s2o: np.ndarray
    ratio_weights: np.ndarray
    atom_scale: float = 0.0
    t_history: tuple = field(default_factory=tuple)

    @property
    def zeta2_star(self) -> float:
        return float(np.sum(self.w_model[:, None] * self.cond * self.atoms**2))

    @property
    def mu_k(self) -> np.ndarray:
        return np.sum(self.cond * self.atoms, axis=1)

    @property
    def g0_k(self) -> np.ndarray:
        return self.cond[:, 0]

    def psi(self) -> float:
        mass = self.w_model[:, None] * self.cond
        return psi_c_ratio(mass, self.atoms, self.Qg, self.Qg[:, [0]])


@dataclass(frozen=True)
class _Evaluation:
    psi: float
    zeta2: float
    D1g: np.ndarray
    D1o: np.ndarray
    Ho: np.ndarray
    Do: np.ndarray


def _evaluate(state: ContinuousNuisance, a, y) -> _Evaluation:
    zeta2 = state.zeta2_star
    psi = state.psi()
    q0 = state.Qg[:, 0]
    D1g = state.atoms * (state.Qg - q0[:, None] - state.atoms * psi) / zeta2
    d1o, d2o = influence_c_parts(a, y, state.Qo, q0, state.mu_k, state.g0_k, psi, zeta2)
    Ho = np.where(a == 0, -state.mu_k / state.g0_k, a)
    return _Evaluation(psi, zeta2, D1g, d1o, Ho, d1o + d2o)


def initial_nuisance(sample: WeightedSample, context, *, interactions=True, g_min=G_MIN, n_atoms=50,
                     groups=0, outcome_context=None, outcome_groups=None) -> ContinuousNuisance:
    """Fit ``Q``, ``mu``, ``g0`` and ``sigma2`` and build ``P^0``.

    ``context`` feeds the exposure models and ``outcome_context`` (default:
    the same) the outcome models; ``groups`` / ``outcome_groups`` count
    trailing one-hot columns that split the corresponding fits.
    """
    a, y = sample.a, sample.y
    if outcome_context is None:
        q_ctx, q_groups = context, groups
    else:
        q_ctx, q_groups = outcome_context, outcome_groups or 0
    w = sample.ht_weights
    omega = w / w.sum()

    Q = fit_Q(sample, q_ctx, interactions, q_groups)
    g0 = fit_g0_continuous(sample, context, g_min, groups)
    mu = fit_mu(sample, context, groups)
    Qo = np.clip(Q.predict(q_ctx, a), _Q_EPS, 1 - _Q_EPS)
    sigma2 = fit_sigma2(sample, q_ctx, (y - Qo) ** 2, interactions, q_groups)

    g0v = g0.predict(context)
    muv = mu.predict(context)
    m = muv / (1.0 - g0v)
    zeta2_0 = float(np.sum(omega * a * a))

    nz = a != 0
    levels = (np.arange(n_atoms) + 0.5) / n_atoms
    e = _weighted_quantiles(a[nz] - m[nz], w[nz], levels) if nz.sum() >= 2 else np.zeros(n_atoms)
    e = e - e.mean()
    var_e = float(np.mean(e * e))
    base = float(np.sum(omega * (1.0 - g0v) * m * m))
    spread = float(np.sum(omega * (1.0 - g0v))) * var_e
    if spread > 0 and zeta2_0 > base:
        s = math.sqrt((zeta2_0 - base) / spread)
    else:
        s = 0.0
        logger.warning("cannot match the HT second moment of A with the fitted mu and g0; using point atoms")

    atoms = np.zeros((len(a), n_atoms + 1))
    atoms[:, 1:] = m[:, None] + s * e[None, :]
    cond = np.empty_like(atoms)
    cond[:, 0] = g0v
    cond[:, 1:] = ((1.0 - g0v) / n_atoms)[:, None]

    Qg = np.clip(Q.predict_grid(q_ctx, atoms), _Q_EPS, 1 - _Q_EPS)
    s2g = sigma2.predict_grid(q_ctx, atoms)
    s2o = sigma2.predict(q_ctx, a)
    return ContinuousNuisance(Q, mu, g0, sigma2, zeta2_0, atoms, cond, omega, Qg, Qo, s2g, s2o,
                              np.ones(len(a)), s)


def fluctuate_state(state: ContinuousNuisance, t: float, ev: _Evaluation, a) -> ContinuousNuisance:
    """``P^k(t)`` with ``dP^k(t)/dP^k = 1 + t D(P^k)``, propagated to every component."""
    if t == 0.0:
        return replace(state, t_history=state.t_history + (0.0,))
    zeta2 = ev.zeta2
    mu, g0 = state.mu_k, state.g0_k
    Hg = state.atoms.copy()
    Hg[:, 0] = -mu / g0
    ed1 = np.sum(state.cond * ev.D1g, axis=1)
    cond = state.cond * (1.0 + t * ev.D1g) / (1.0 + t * ed1)[:, None]
    w_model = state.w_model * (1.0 + t * ed1)
    Qg = state.Qg + t * state.s2g * Hg / (zeta2 * (1.0 + t * ev.D1g))
    Qo = state.Qo + t * state.s2o * ev.Ho / (zeta2 * (1.0 + t * ev.D1o))
    return replace(
        state,
        cond=cond,
        w_model=w_model,
        Qg=np.clip(Qg, _Q_EPS, 1 - _Q_EPS),
        Qo=np.clip(Qo, _Q_EPS, 1 - _Q_EPS),
        ratio_weights=state.ratio_weights * (1.0 + t * ev.Do),
        t_history=state.t_history + (float(t),),
    )


def target_step_c(state: ContinuousNuisance, sample: WeightedSample, ev: _Evaluation | None = None):
    """One maximum-likelihood move along the density-ratio fluctuation.

    Returns ``(new_state, t, at_bound)``. The step is confined to
    ``|t| <= 0.99 / max|D|`` over observed and grid atoms so every density
    factor stays positive.
    """
    a, y = sample.a, sample.y
    ev = ev or _evaluate(state, a, y)
    sup = max(float(np.max(np.abs(ev.Do))), float(np.max(np.abs(ev.D1g))), float(np.max(np.abs(ev.D1o))))
    if sup <= _D_FLOOR:
        return fluctuate_state(state, 0.0, ev, a), 0.0, False
    t, at_bound = max_loglik_step(ev.Do, sample.ht_weights, _STEP_MARGIN / sup)
    return fluctuate_state(state, t, ev, a), t, at_bound


def _mc_psi(state: ContinuousNuisance, B: int, rng: np.random.Generator) -> float:
    # W from the context masses, then A from the conditional atoms
    rows = rng.choice(len(state.w_model), size=B, p=state.w_model / state.w_model.sum())
    cum = np.cumsum(state.cond[rows], axis=1)
    u = rng.random(B) * cum[:, -1]
    cols = np.minimum((cum < u[:, None]).sum(axis=1), cum.shape[1] - 1)
    a = state.atoms[rows, cols]
    num = np.mean(a * (state.Qg[rows, cols] - state.Qg[rows, 0]))
    return float(num / state.zeta2_star)


class ContinuousTMLE(BaseEstimator):
    """Iterative TMLE of the continuous-exposure variable importance.

    Parameters
    ----------
    alpha : float
    g_min : float
        Truncation of ``g(0 | w)``.
    max_iter : int
        Maximum number of targeting steps.
    mic : float
        Stop once ``|HT mean of D| <= mic * sqrt(Sigma_n / n)``.
    psi_tol : float
        Stop once a step moves the estimate by at most ``psi_tol`` times the
        current interval half-width.
    n_atoms : int
        Nonzero exposure atoms per context in the working measure.
    mc_mode : bool
        Report the Monte Carlo evaluation of the final estimate (``mc_B``
        draws) instead of the exact atom sum; the exact value stays in
        ``report_.extra``.
    random_state : int, Generator or None
        Only used in ``mc_mode``.
    stratify : {"none", "outcome", "all"}
        Fit the outcome models (``Q``, ``sigma2``), or every nuisance,
        separately within each stratum of ``V`` instead of adding stratum
        main effects.
    """

    def __init__(self, alpha=0.05, g_min=G_MIN, interactions=True, include_stratum=True, max_iter=7,
                 mic=0.01, psi_tol=0.05, n_atoms=50, mc_mode=False, mc_B=100_000, random_state=None,
                 outcome_features=None, stratify="none"):
        self.alpha = alpha
        self.g_min = g_min
        self.interactions = interactions
        self.include_stratum = include_stratum
        self.max_iter = max_iter
        self.mic = mic
        self.psi_tol = psi_tol
        self.n_atoms = n_atoms
        self.mc_mode = mc_mode
        self.mc_B = mc_B
        self.random_state = random_state
        self.outcome_features = outcome_features
        self.stratify = stratify

    def fit(self, X, a, y, v=None, *, inclusion_prob=None, population_size=None, sampling_h=None,
            outcome_scale=None):
        sample = sample_from_arrays(X, a, y, v, inclusion_prob=inclusion_prob, population_size=population_size,
                                    sampling_h=sampling_h, outcome_scale=outcome_scale, exposure_kind=CONTINUOUS)
        return self.fit_sample(sample)

    def fit_sample(self, sample: WeightedSample):
        ds = sample.dataset
        if ds.exposure_kind != CONTINUOUS:
            raise InputError("ContinuousTMLE requires a continuous-exposure dataset")
        if sample.size == 0:
            raise InputError("empty sample")
        if self.stratify not in STRATIFY_MODES:
            raise InputError(f"stratify must be one of {STRATIFY_MODES}, got {self.stratify!r}")
        ctx, _ = context_matrix(sample, self.include_stratum)
        groups = q_groups = 0
        q_ctx = None
        if self.stratify != "none":
            q_ctx, q_groups = stratified_context(sample)
            if self.stratify == "all":
                ctx, groups = q_ctx, q_groups
        if self.outcome_features is not None:
            q_ctx, q_groups = np.asarray(self.outcome_features(sample), float), 0
        state = initial_nuisance(sample, ctx, interactions=self.interactions, g_min=self.g_min,
                                 n_atoms=self.n_atoms, groups=groups, outcome_context=q_ctx,
                                 outcome_groups=q_groups)
        a, y, w, n = sample.a, sample.y, sample.ht_weights, sample.n
        z = normal_quantile(1 - self.alpha / 2)
        zeta2_initial = state.zeta2_star

        score_trace, psi_trace, loglik_trace = [], [], [0.0]
        stop_reason = "max_iter"
        for k in range(self.max_iter + 1):
            ev = _evaluate(state, a, y)
            score = float(np.sum(w * ev.Do))
            sigma_n = float(np.sum(w * ev.Do**2 / sample.h))
            score_trace.append(score)
            psi_trace.append(ev.psi)
            if abs(score) <= max(self.mic * math.sqrt(sigma_n / n), _D_FLOOR):
                stop_reason = "score"
                break
            if k > 0:
                gamma_k = 1.0 - state.zeta2_0 / ev.zeta2
                half = z * math.sqrt(sigma_n) / (abs(1.0 - gamma_k) * math.sqrt(n))
                if abs(psi_trace[-1] - psi_trace[-2]) <= self.psi_tol * half:
                    stop_reason = "psi"
                    break
            if k == self.max_iter:
                break
            state, t, at_bound = target_step_c(state, sample, ev)
            if at_bound:
                logger.info("targeting step %d hit the positivity bound (t=%.3g)", k, t)
            loglik_trace.append(float(np.sum(w * np.log(state.ratio_weights))))

        zeta2_star = ev.zeta2
        gamma = 1.0 - state.zeta2_0 / zeta2_star
        if abs(1.0 - gamma) < _GAMMA_GUARD:
            raise EstimationError("degenerate targeting: 1 - Gamma_n vanishes", {"gamma_n": gamma})
        psi_exact = ev.psi
        psi = psi_exact
        extra = {
            "zeta2_0": state.zeta2_0,
            "zeta2_initial": zeta2_initial,
            "zeta2_star": zeta2_star,
            "t_history": list(state.t_history),
            "stop_reason": stop_reason,
            "loglik_trace": loglik_trace,
            "atom_scale": state.atom_scale,
        }
        scale = ds.outcome_range
        if self.mc_mode:
            psi = _mc_psi(state, int(self.mc_B), as_generator(self.random_state))
            extra["psi_exact"] = psi_exact * scale

        lo, hi = confidence_interval(psi * scale, sigma_n * scale**2, n, self.alpha, gamma)
        self.nuisance_ = state
        self.influence_ = ev.Do * scale
        self.report_ = TmleReport(
            parameter="continuous", psi_star=psi * scale, sigma_n=sigma_n * scale**2, gamma_n=gamma,
            score_residual=score * scale, ci=(lo, hi), n=n, N=sample.N, alpha=self.alpha,
            psi_initial=psi_trace[0] * scale, iterations=len(state.t_history),
            converged=stop_reason != "max_iter",
            score_trace=[s * scale for s in score_trace], psi_trace=[p * scale for p in psi_trace],
            extra=extra,
        )
        self.psi_ = self.report_.psi_star
        self.sigma_n_ = self.report_.sigma_n
        self.ci_ = self.report_.ci
        return self

    def nuisance_dump(self):
        check_is_fitted(self, "nuisance_")
        nu = self.nuisance_
        return {
            "Q": nu.Q.to_dict(), "mu": nu.mu.to_dict(), "g0": nu.g0.to_dict(), "sigma2": nu.sigma2.to_dict(),
            "zeta2_0": nu.zeta2_0, "zeta2_star": nu.zeta2_star, "t_history": list(nu.t_history),
        }


def estimate_continuous(sample: WeightedSample, config: dict | None = None) -> TmleReport:
    return ContinuousTMLE(**(config or {})).fit_sample(sample).report_
