"""Estimation report shared by both TMLE variants, and the Wald-type interval."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from scipy.stats import norm


def normal_quantile(q: float) -> float:
    return float(norm.ppf(q))


def confidence_interval(psi: float, sigma_n: float, n: int, alpha: float = 0.05, gamma_n: float = 0.0):
    """``psi +/- z_{1-alpha/2} sqrt(sigma_n) / ((1 - gamma_n) sqrt(n))``."""
    half = normal_quantile(1.0 - alpha / 2.0) * math.sqrt(max(sigma_n, 0.0)) / (abs(1.0 - gamma_n) * math.sqrt(n))
    return psi - half, psi + half


@dataclass
class TmleReport:
    """Point estimate, variance and interval, in original outcome units.

    ``sigma_n`` is the HT substitution estimate of the asymptotic variance of
    ``(1 - gamma_n) sqrt(n) (psi - psi_0)``; ``score_residual`` is the HT mean
    of the influence curve at the targeted fit.
    """

    parameter: str
    psi_star: float
    sigma_n: float
    gamma_n: float
    score_residual: float
    ci: tuple[float, float]
    n: int
    N: int
    alpha: float
    psi_initial: float = float("nan")
    iterations: int = 0
    converged: bool = True
    score_trace: list[float] = field(default_factory=list)
    psi_trace: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci[1] - self.ci[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = list(self.ci)
        d["psi"] = d.pop("psi_star")
        return d
