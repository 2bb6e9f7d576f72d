"""One-step TMLE of the binary-exposure variable importance on an HT-weighted sub-sample.

The parameter is ``E[Q(1, W) - Q(0, W)]`` with ``Q(a, w) = E[Y | A=a, W=w]``.
Initial ``Q`` and ``g`` are weighted logistic fits; ``Q`` is then fluctuated
along the clever covariate ``(2A - 1) / g(A | W)`` on the logit scale, which
solves the HT-weighted score equation in a single step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import BINARY, WeightedSample, sample_from_arrays
from .exceptions import InputError
from .glm import G_MIN, Nuisance, context_matrix, fit_g_binary, fit_Q
from .report import TmleReport, confidence_interval

_Q_CLIP = 1e-12


def influence_b(q1, q0, qa, g1, a, y, psi):
    """Influence curve ``D1 + D2`` at observations ``(a, y)``.

    ``D1 = Q(1, w) - Q(0, w) - psi`` and ``D2 = (y - Q(a, w)) (2a - 1) / g(a | w)``.
    """
    a = np.asarray(a, dtype=float)
    g1 = np.asarray(g1, dtype=float)
    ga = np.where(a == 1, g1, 1.0 - g1)
    d1 = np.asarray(q1) - np.asarray(q0) - psi
    d2 = (np.asarray(y) - np.asarray(qa)) * (2.0 * a - 1.0) / ga
    return d1 + d2


def fluctuation_score(t, logit_q, covariate, y, weights):
    """HT-weighted score ``sum w (y - Q(t)) H``; decreasing in ``t``."""
    q = expit(logit_q + t * covariate)
    return float(np.sum(weights * (y - q) * covariate))


def fluctuate_binary(logit_q, covariate, y, weights, tol=1e-12, bound=50.0, max_iter=200):
    """Minimise the weighted logistic risk along ``logit Q(t) = logit Q + t H``.

    Safeguarded Newton on the (strictly decreasing) score, keeping a sign
    bracket; the bracket is widened geometrically up to ``|t| <= bound``.

    Returns
    -------
    t : float
    converged : bool
        False when the minimiser sits at the bracket bound (separation) or
        the score did not reach ``tol``.
    """
    def score(t):
        return fluctuation_score(t, logit_q, covariate, y, weights)

    s0 = score(0.0)
    if abs(s0) <= tol:
        return 0.0, True

    # sign bracket: score(lo) > 0 > score(hi)
    width = 1.0
    if s0 > 0:
        lo, hi = 0.0, width
        while score(hi) > 0:
            if hi >= bound:
                return bound, False
            lo, hi = hi, min(2.0 * hi, bound)
    else:
        lo, hi = -width, 0.0
        while score(lo) < 0:
            if lo <= -bound:
                return -bound, False
            hi, lo = lo, max(2.0 * lo, -bound)

    t = 0.0 if lo <= 0.0 <= hi else 0.5 * (lo + hi)
    for _ in range(max_iter):
        q = expit(logit_q + t * covariate)
        s = float(np.sum(weights * (y - q) * covariate))
        if abs(s) <= tol:
            return _check_separation(t, logit_q, covariate, y, weights, bound)
        if s > 0:
            lo = t
        else:
            hi = t
        curv = float(np.sum(weights * q * (1.0 - q) * covariate**2))
        t_new = t + s / curv if curv > 0 else 0.5 * (lo + hi)
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(t)):
            return _check_separation(t_new, logit_q, covariate, y, weights, bound)
        t = t_new
    return t, abs(score(t)) <= tol


def _risk_along(t, logit_q, covariate, y, weights):
    eta = logit_q + t * covariate
    return float(np.sum(weights * (np.logaddexp(0.0, eta) - y * eta)))


def _check_separation(t, logit_q, covariate, y, weights, bound):
    # the score can underflow before the risk stops decreasing; the risk is
    # convex in t, so a genuine interior minimiser beats the bracket bound
    if t == 0.0:
        return t, True
    edge = np.copysign(bound, t)
    if _risk_along(edge, logit_q, covariate, y, weights) <= _risk_along(t, logit_q, covariate, y, weights):
        return edge, False
    return t, True


@dataclass
class BinaryNuisance:
    """Initial fits, the fluctuation and the targeted conditional means at the sampled units."""

    Q: Nuisance | None
    g: Nuisance | None
    g1: np.ndarray
    q1: np.ndarray
    q0: np.ndarray
    t_star: float
    q1_star: np.ndarray
    q0_star: np.ndarray

    def q_star(self, a):
        return np.where(np.asarray(a) == 1, self.q1_star, self.q0_star)


class BinaryTMLE(BaseEstimator):
    """TMLE of ``E[E(Y | A=1, W) - E(Y | A=0, W)]`` from an HT-weighted sub-sample.

    Parameters
    ----------
    alpha : float
        Interval level is ``1 - alpha``.
    g_min : float
        Truncation of ``g(1 | w)`` into ``[g_min, 1 - g_min]``.
    interactions : bool
        Include exposure-by-context terms in the outcome regression.
    include_stratum : bool
        Add stratum dummies to the context features.
    fluctuation_tol : float
        Tolerance on the HT mean of the fluctuation score.
    outcome_features : callable, optional
        ``sample -> context matrix`` for the outcome regression only; used to
        deliberately misspecify ``Q`` in robustness checks.

    Attributes
    ----------
    psi_, sigma_n_, ci_ : float, float, tuple
        In original outcome units.
    report_ : TmleReport
    nuisance_ : BinaryNuisance
    influence_ : ndarray
        Influence curve at the targeted fit, per sampled unit.
    """

    def __init__(self, alpha=0.05, g_min=G_MIN, interactions=True, include_stratum=True,
                 fluctuation_tol=1e-12, t_bound=50.0, outcome_features=None):
        self.alpha = alpha
        self.g_min = g_min
        self.interactions = interactions
        self.include_stratum = include_stratum
        self.fluctuation_tol = fluctuation_tol
        self.t_bound = t_bound
        self.outcome_features = outcome_features

    def fit(self, X, a, y, v=None, *, inclusion_prob=None, population_size=None, sampling_h=None,
            outcome_scale=None, g1=None):
        """Fit from arrays of sampled units; defaults describe an i.i.d. sample."""
        sample = sample_from_arrays(X, a, y, v, inclusion_prob=inclusion_prob, population_size=population_size,
                                    sampling_h=sampling_h, outcome_scale=outcome_scale, exposure_kind=BINARY)
        return self.fit_sample(sample, g1=g1)

    def fit_sample(self, sample: WeightedSample, g1=None):
        """Fit on a drawn sub-sample.

        ``g1`` optionally fixes ``g(1 | W)`` at the sampled units (known
        exposure mechanism); intended for checks, not routine use.
        """
        ds = sample.dataset
        if ds.exposure_kind != BINARY:
            raise InputError("BinaryTMLE requires a binary-exposure dataset")
        if sample.size == 0:
            raise InputError("empty sample")
        ctx, _ = context_matrix(sample, self.include_stratum)
        q_ctx = ctx if self.outcome_features is None else np.asarray(self.outcome_features(sample), float)
        a, y, w = sample.a, sample.y, sample.ht_weights

        Q = fit_Q(sample, q_ctx, self.interactions)
        if g1 is None:
            g = fit_g_binary(sample, ctx, self.g_min)
            g1 = g.predict(ctx)
        else:
            g = None
            g1 = np.clip(np.asarray(g1, dtype=float), self.g_min, 1.0 - self.g_min)
        q1 = np.clip(Q.predict(q_ctx, 1.0), _Q_CLIP, 1 - _Q_CLIP)
        q0 = np.clip(Q.predict(q_ctx, 0.0), _Q_CLIP, 1 - _Q_CLIP)
        qa = np.where(a == 1, q1, q0)

        h1, h0 = 1.0 / g1, -1.0 / (1.0 - g1)
        ha = np.where(a == 1, h1, h0)
        t_star, converged = fluctuate_binary(logit(qa), ha, y, w, tol=self.fluctuation_tol, bound=self.t_bound)
        q1s = expit(logit(q1) + t_star * h1)
        q0s = expit(logit(q0) + t_star * h0)
        qas = np.where(a == 1, q1s, q0s)

        wsum = float(np.sum(w))
        psi0 = float(np.sum(w * (q1 - q0)) / wsum)
        psi = float(np.sum(w * (q1s - q0s)) / wsum)
        D = influence_b(q1s, q0s, qas, g1, a, y, psi)
        score = float(np.sum(w * D))
        sigma_n = float(np.sum(w * D**2 / sample.h))

        scale = ds.outcome_range
        lo, hi = confidence_interval(psi * scale, sigma_n * scale**2, sample.n, self.alpha)
        self.nuisance_ = BinaryNuisance(Q, g, g1, q1, q0, t_star, q1s, q0s)
        self.influence_ = D * scale
        self.report_ = TmleReport(
            parameter="binary", psi_star=psi * scale, sigma_n=sigma_n * scale**2, gamma_n=0.0,
            score_residual=score * scale, ci=(lo, hi), n=sample.n, N=sample.N, alpha=self.alpha,
            psi_initial=psi0 * scale, iterations=1, converged=bool(converged),
            score_trace=[float(np.sum(w * influence_b(q1, q0, qa, g1, a, y, psi0))) * scale, score * scale],
            psi_trace=[psi0 * scale, psi * scale], extra={"t_star": t_star},
        )
        self.psi_ = self.report_.psi_star
        self.sigma_n_ = self.report_.sigma_n
        self.ci_ = self.report_.ci
        return self

    def nuisance_dump(self):
        check_is_fitted(self, "nuisance_")
        nu = self.nuisance_
        return {"Q": nu.Q.to_dict(), "g": nu.g.to_dict() if nu.g else "fixed", "t_star": nu.t_star}


def estimate_binary(sample: WeightedSample, config: dict | None = None, g1=None) -> TmleReport:
    return BinaryTMLE(**(config or {})).fit_sample(sample, g1=g1).report_
