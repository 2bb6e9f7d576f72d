"""Pilot-based choice of the variance-optimal sampling function.

A uniform pilot sub-sample is analysed with the TMLE; the squared influence
curve is averaged within strata to get ``f2(v) = sqrt(E[D^2 | V = v])`` and
the sampling function is set proportional to ``f2``, which minimises
``sum_v P(v) f2(v)^2 / h(v)`` subject to ``sum_v P(v) h(v) = 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import BINARY, CONTINUOUS, Dataset, SamplingFunction
from .exceptions import InputError
from .sampling import draw_sample, make_plan

logger = logging.getLogger(__name__)

H_FLOOR = 0.05


@dataclass(frozen=True)
class PilotResult:
    """Outcome of the pilot phase.

    ``h_opt`` has full-data mean 1; ``imputed_strata`` lists strata absent
    from the pilot, whose ``f2`` was set to the pooled value.
    """

    f2_by_stratum: dict
    pi2_hat: float
    h_opt: SamplingFunction
    pilot_indices: np.ndarray
    imputed_strata: tuple = ()
    report: object = None
    extra: dict = field(default_factory=dict)


def asymptotic_variance(f2_by_stratum, stratum_probs, h) -> float:
    """``sum_v P(v) f2(v)^2 / h(v)``; all three arguments are mappings keyed by stratum."""
    hv = h.values if isinstance(h, SamplingFunction) else h
    total = 0.0
    for v, pv in stratum_probs.items():
        if not hv[v] > 0:
            raise InputError(f"h must be positive, got h({v!r}) = {hv[v]}")
        total += pv * f2_by_stratum[v] ** 2 / hv[v]
    return float(total)


def optimal_h(f2_by_stratum, stratum_probs, floor: float = H_FLOOR) -> tuple[dict, float]:
    """``max(f2 / pi2, floor)`` renormalised to mean 1 under ``stratum_probs``.

    Returns the mapping and ``pi2 = sum_v P(v) f2(v)``.
    """
    pi2 = float(sum(stratum_probs[v] * f2_by_stratum[v] for v in stratum_probs))
    if not pi2 > 0:
        raise InputError("influence curve vanishes on the pilot; cannot form an optimal h")
    raw = {v: max(f2_by_stratum[v] / pi2, floor) for v in stratum_probs}
    mean = sum(stratum_probs[v] * raw[v] for v in stratum_probs)
    return {v: raw[v] / mean for v in stratum_probs}, pi2


def stratum_f2(influence, codes, n_strata: int):
    """Per-stratum root mean square of the influence curve; NaN where no unit falls."""
    sq = np.bincount(codes, weights=np.asarray(influence) ** 2, minlength=n_strata)
    cnt = np.bincount(codes, minlength=n_strata)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(sq / cnt), cnt


def run_pilot(
    dataset: Dataset,
    n0: int,
    estimator: str | None = None,
    rng: np.random.Generator | None = None,
    *,
    estimator_params: dict | None = None,
    design: str = "rejective",
    floor: float = H_FLOOR,
) -> PilotResult:
    """Uniform pilot draw, TMLE fit and the induced optimal sampling function."""
    from .tmle_binary import BinaryTMLE
    from .tmle_continuous import ContinuousTMLE

    estimator = estimator or dataset.exposure_kind
    if estimator not in (BINARY, CONTINUOUS):
        raise InputError(f"unknown estimator {estimator!r}")
    rng = rng if rng is not None else np.random.default_rng()
    plan = make_plan(dataset, SamplingFunction.uniform(dataset.stratum_domain), n0)
    sample = draw_sample(plan, dataset, rng, design)
    model = (BinaryTMLE if estimator == BINARY else ContinuousTMLE)(**(estimator_params or {}))
    model.fit_sample(sample)

    k = len(dataset.stratum_domain)
    f2, counts = stratum_f2(model.influence_, sample.v, k)
    imputed = tuple(dataset.stratum_domain[c] for c in np.flatnonzero(counts == 0))
    if imputed:
        pooled = float(np.sqrt(np.mean(model.influence_**2)))
        f2 = np.where(counts == 0, pooled, f2)
        logger.warning("strata %s absent from the pilot; f2 imputed with the pooled value", imputed)
    labels = dataset.stratum_domain
    probs = dict(zip(labels, dataset.stratum_frequencies()))
    f2_map = {lab: float(x) for lab, x in zip(labels, f2)}
    h_map, pi2 = optimal_h(f2_map, probs, floor)
    return PilotResult(f2_map, pi2, SamplingFunction(h_map), sample.indices, imputed, model.report_,
                       {"n0": n0, "counts": dict(zip(labels, counts.tolist()))})
