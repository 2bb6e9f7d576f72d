"""Weighted logistic-loss regression and the nuisance fits built on it.

Targets may be fractional in [0, 1]; the loss is the logistic (cross-entropy)
loss and the link is the logit, so the same engine serves outcome
regressions, exposure mechanisms and the rescaled conditional mean of a
continuous exposure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import WeightedSample
from .exceptions import PositivityError

logger = logging.getLogger(__name__)

LOSS_CLAMP = 1e-12
G_MIN = 0.01


def logistic_loss(u, v):
    """``-[u log v + (1 - u) log(1 - v)]``, with ``v`` clamped away from 0 and 1."""
    v = np.clip(np.asarray(v, dtype=float), LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    u = np.asarray(u, dtype=float)
    return -(u * np.log(v) + (1.0 - u) * np.log1p(-v))


def _risk(eta, y, w):
    # sum_i w_i * l(y_i, expit(eta_i)) without forming expit
    return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))


class WeightedLogisticRegression(BaseEstimator):
    """Newton/IRLS minimiser of ``sum_i w_i l(y_i, expit(x_i b + offset_i))``.

    Parameters
    ----------
    tol : float
        Stop when the gradient norm is at most ``tol * sum(w)``.
    max_iter : int
        Newton iterations before giving up; the best iterate is kept and
        ``converged_`` is set to False.
    ridge : float
        Relative ridge added (and flagged) when the weighted design is rank
        deficient or the Hessian is singular.

    Attributes
    ----------
    coef_ : ndarray
    converged_ : bool
    rank_deficient_ : bool
    n_iter_ : int
    """

    def __init__(self, tol=1e-8, max_iter=100, ridge=1e-8):
        self.tol = tol
        self.max_iter = max_iter
        self.ridge = ridge

    def fit(self, X, y, sample_weight=None, offset=None):
        X = check_array(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        check_consistent_length(X, y)
        if np.any((y < 0) | (y > 1)):
            raise ValueError("targets must lie in [0, 1]")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float).ravel()
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be nonnegative with at least one positive entry")
        off = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float).ravel()
        n_features = X.shape[1]
        wsum = float(w.sum())

        self.rank_deficient_ = bool(np.linalg.matrix_rank(X[w > 0]) < n_features)
        lam = self.ridge * wsum if self.rank_deficient_ else 0.0

        def objective(b):
            return _risk(X @ b + off, y, w) + 0.5 * lam * float(b @ b)

        beta = np.zeros(n_features)
        loss = objective(beta)
        self.converged_ = False
        it = 0
        for it in range(1, self.max_iter + 1):
            q = expit(X @ beta + off)
            grad = X.T @ (w * (q - y)) + lam * beta
            if np.linalg.norm(grad) <= self.tol * wsum:
                self.converged_ = True
                it -= 1
                break
            hess = (X * (w * q * (1.0 - q))[:, None]).T @ X
            hess[np.diag_indices_from(hess)] += lam
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                self.rank_deficient_ = True
                lam = max(lam, self.ridge * wsum)
                hess[np.diag_indices_from(hess)] += lam
                step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            t = 1.0
            while True:
                cand = beta + t * step
                cand_loss = objective(cand)
                if cand_loss <= loss or t < 1e-10:
                    break
                t *= 0.5
            if cand_loss > loss:
                # no descent possible at machine precision
                self.converged_ = np.linalg.norm(grad) <= 1e3 * self.tol * wsum
                break
            beta, loss = cand, cand_loss
        else:
            q = expit(X @ beta + off)
            grad = X.T @ (w * (q - y)) + lam * beta
            self.converged_ = bool(np.linalg.norm(grad) <= self.tol * wsum)
        if not self.converged_:
            logger.warning("weighted logistic fit did not converge in %d iterations (separation?)", self.max_iter)
        if self.rank_deficient_:
            logger.info("rank-deficient design: ridge %.3g added", self.ridge)
        self.coef_ = beta
        self.n_iter_ = it
        self.loss_ = loss
        self.n_features_in_ = n_features
        return self

    def decision_function(self, X, offset=None):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        eta = X @ self.coef_
        return eta if offset is None else eta + np.asarray(offset, dtype=float)

    def predict(self, X, offset=None):
        """Fitted conditional mean in (0, 1)."""
        return expit(self.decision_function(X, offset))

    def to_dict(self):
        check_is_fitted(self, "coef_")
        return {
            "link": "logit",
            "coef": self.coef_.tolist(),
            "converged": bool(self.converged_),
            "rank_deficient": bool(self.rank_deficient_),
            "n_iter": int(self.n_iter_),
        }


def fit_weighted_glm(features, targets, weights, offset=None, **kwargs) -> WeightedLogisticRegression:
    return WeightedLogisticRegression(**kwargs).fit(features, targets, sample_weight=weights, offset=offset)


def context_matrix(sample: WeightedSample, include_stratum: bool = True) -> tuple[np.ndarray, list[str]]:
    """Covariates of the selected units, optionally with stratum dummies.

    Dummy columns that are constant within the sample are dropped.
    """
    ds = sample.dataset
    cols = [sample.w]
    names = list(ds.w_names) if ds.w_names else [f"w{k + 1}" for k in range(ds.w.shape[1])]
    if include_stratum and len(ds.stratum_domain) > 1:
        v = sample.v
        for code, label in enumerate(ds.stratum_domain[1:], start=1):
            d = (v == code).astype(float)
            if 0.0 < d.mean() < 1.0:
                cols.append(d[:, None])
                names.append(f"V={label}")
    return np.hstack(cols), names


def stratified_context(sample: WeightedSample) -> tuple[np.ndarray, int]:
    """``[W, onehot(V)]`` over the strata present in the sample, and the number of groups."""
    present = np.unique(sample.v)
    onehot = (sample.v[:, None] == present[None, :]).astype(float)
    return np.hstack([sample.w, onehot]), len(present)


def design_matrix(context: np.ndarray, exposure=None, interactions: bool = True) -> np.ndarray:
    """``[1, W]`` or ``[1, A, W, A*W]`` (interactions optional)."""
    n = context.shape[0]
    cols = [np.ones((n, 1))]
    if exposure is not None:
        a = np.broadcast_to(np.asarray(exposure, dtype=float), (n,))[:, None]
        cols.append(a)
        cols.append(context)
        if interactions:
            cols.append(a * context)
    else:
        cols.append(context)
    return np.hstack(cols)


@dataclass(frozen=True)
class FeatureMap:
    """Feature construction for a nuisance regression.

    With ``n_groups > 0`` the last ``n_groups`` context columns are a one-hot
    group indicator and the base features are fully interacted with it, so
    each group gets its own coefficients.
    """

    uses_exposure: bool
    interactions: bool = True
    n_groups: int = 0

    def __call__(self, context, exposure=None):
        context = np.asarray(context, dtype=float)
        exposure = exposure if self.uses_exposure else None
        if not self.n_groups:
            return design_matrix(context, exposure, self.interactions)
        base, groups = context[:, :-self.n_groups], context[:, -self.n_groups:]
        X = design_matrix(base, exposure, self.interactions)
        return np.hstack([X * groups[:, [g]] for g in range(self.n_groups)])

    def to_dict(self):
        return {"intercept": True, "exposure": self.uses_exposure,
                "interactions": self.uses_exposure and self.interactions, "groups": self.n_groups}


@dataclass
class Nuisance:
    """A fitted GLM plus the feature map and output transform it was fit with."""

    model: WeightedLogisticRegression
    features: FeatureMap
    lower: float = 0.0
    upper: float = 1.0
    scale: float = 1.0
    shift: float = 0.0
    name: str = ""

    @property
    def uses_exposure(self) -> bool:
        return self.features.uses_exposure

    def predict(self, context, exposure=None):
        X = self.features(context, exposure)
        return self.shift + self.scale * np.clip(self.model.predict(X), self.lower, self.upper)

    def predict_grid(self, context, exposures):
        """Predictions at ``(exposures[i, k], context[i])`` for an exposure-dependent model.

        The linear predictor is affine in the exposure, so it is assembled
        from its values at 0 and 1.
        """
        if not self.uses_exposure:
            raise ValueError(f"nuisance {self.name!r} does not depend on the exposure")
        b = self.model.coef_
        base = self.features(context, 0.0) @ b
        slope = self.features(context, 1.0) @ b - base
        eta = base[:, None] + np.asarray(exposures, dtype=float) * slope[:, None]
        return self.shift + self.scale * np.clip(expit(eta), self.lower, self.upper)

    def to_dict(self):
        return {
            "name": self.name,
            "features": self.features.to_dict(),
            "truncation": [self.lower, self.upper],
            "scale": self.scale,
            "shift": self.shift,
            **self.model.to_dict(),
        }


def fit_Q(sample: WeightedSample, context, interactions=True, n_groups=0) -> Nuisance:
    """Outcome regression ``Q(a, w)``."""
    fm = FeatureMap(True, interactions, n_groups)
    model = fit_weighted_glm(fm(context, sample.a), sample.y, sample.ht_weights)
    return Nuisance(model, fm, name="Q")


def fit_g_binary(sample: WeightedSample, context, g_min=G_MIN, n_groups=0) -> Nuisance:
    """``g(1 | w)`` truncated to ``[g_min, 1 - g_min]``."""
    a = sample.a
    if np.all(a == 1) or np.all(a == 0):
        raise PositivityError("positivity violated in sample: exposure is constant")
    fm = FeatureMap(False, n_groups=n_groups)
    model = fit_weighted_glm(fm(context), a, sample.ht_weights)
    return Nuisance(model, fm, lower=g_min, upper=1.0 - g_min, name="g")


def fit_g0_continuous(sample: WeightedSample, context, g_min=G_MIN, n_groups=0) -> Nuisance:
    """``g(0 | w) = P(A = 0 | w)`` truncated to ``[g_min, 1 - g_min]``."""
    zero = (sample.a == 0).astype(float)
    if zero.all() or not zero.any():
        raise PositivityError("positivity violated in sample: need both zero and nonzero exposures")
    fm = FeatureMap(False, n_groups=n_groups)
    model = fit_weighted_glm(fm(context), zero, sample.ht_weights)
    return Nuisance(model, fm, lower=g_min, upper=1.0 - g_min, name="g0")


def fit_mu(sample: WeightedSample, context, n_groups=0) -> Nuisance:
    """``mu(w) = E[A | w]`` for a bounded exposure.

    The exposure is mapped affinely onto [0, 1] (using the sample range
    extended to contain 0) so that the logistic loss applies; predictions are
    mapped back to exposure units.
    """
    a = sample.a
    lo, hi = min(0.0, float(a.min())), max(0.0, float(a.max()))
    if not np.any(a != 0):
        raise PositivityError("positivity violated in sample: exposure is identically zero")
    fm = FeatureMap(False, n_groups=n_groups)
    model = fit_weighted_glm(fm(context), (a - lo) / (hi - lo), sample.ht_weights)
    return Nuisance(model, fm, scale=hi - lo, shift=lo, name="mu")


def fit_sigma2(sample: WeightedSample, context, residual2, interactions=True, n_groups=0) -> Nuisance:
    """Conditional variance of the outcome, regressed on ``(a, w)`` from squared residuals."""
    fm = FeatureMap(True, interactions, n_groups)
    model = fit_weighted_glm(fm(context, sample.a), np.clip(residual2, 0.0, 1.0), sample.ht_weights)
    return Nuisance(model, fm, name="sigma2")
