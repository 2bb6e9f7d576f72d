"""Unequal-probability sampling designs: Poisson, rejective and Pareto.

The rejective design is Poisson sampling conditioned on the realised size
being ``n``; :func:`exact_rejective_design` enumerates it on small
populations and serves as the reference for the samplers.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings

import numpy as np

from .data import Dataset, InclusionPlan, SamplingFunction, WeightedSample
from .exceptions import InputError, RejectiveInfeasible

logger = logging.getLogger(__name__)

DESIGNS = ("poisson", "rejective", "pareto")
MAX_ENUMERATION_N = 20
# grouped acceptance-rejection is used when p takes at most this many values
_MAX_GROUPS = 512


def make_plan(
    dataset: Dataset,
    h: SamplingFunction,
    n: int,
    *,
    clip_eps: float = 1e-6,
    exclude=None,
) -> InclusionPlan:
    """Inclusion probabilities ``p_i = n h(V_i) / N``, clipped into the unit interval.

    Parameters
    ----------
    exclude : array-like of int, optional
        Row indices that must not be drawn (e.g. a pilot sample). They keep
        the original ``N`` in the formula for ``p``.
    """
    N = dataset.N
    n = int(n)
    if n < 1:
        raise InputError(f"sample size must be positive, got {n}")
    if n >= N:
        raise InputError(f"sample size n={n} must be smaller than N={N}")
    hv = h.evaluate(dataset)
    raw = n * hv / N
    p = np.clip(raw, clip_eps, 1.0 - clip_eps)
    n_clipped = int(np.count_nonzero(p != raw))
    if n_clipped:
        logger.warning("clipped %d inclusion probabilities into [%g, %g]", n_clipped, clip_eps, 1 - clip_eps)
    eligible = np.ones(N, dtype=bool)
    if exclude is not None:
        eligible[np.asarray(exclude, dtype=np.intp)] = False
    p.flags.writeable = False
    hv.flags.writeable = False
    eligible.flags.writeable = False
    return InclusionPlan(n=n, p=p, h=hv, N=N, clip_eps=clip_eps, eligible=eligible, n_clipped=n_clipped)


def plan_from_probabilities(p, n: int) -> InclusionPlan:
    """Plan over a bare population with given probabilities (no dataset needed)."""
    p = np.asarray(p, dtype=float)
    N = len(p)
    if np.any(p < 0) or np.any(p > 1):
        raise InputError("inclusion probabilities must lie in [0, 1]")
    return InclusionPlan(n=int(n), p=p, h=p * N / n, N=N, clip_eps=0.0, eligible=np.ones(N, dtype=bool))


def dN_diagnostic(plan: InclusionPlan) -> float:
    """``sum p_i (1 - p_i)``; the rejective/Poisson coupling needs this to be large."""
    d = plan.d_N
    if d < 25:
        warnings.warn(f"d_N = {d:.3g} < 25: rejective design far from its Poisson approximation",
                      RuntimeWarning, stacklevel=2)
    return d


def _sample(plan, dataset, idx, design, attempts=None):
    if dataset is None:
        idx = np.sort(np.asarray(idx, dtype=np.intp))
        return idx
    return WeightedSample.from_plan(plan, dataset, idx, design, attempts)


def poisson_sample(plan: InclusionPlan, rng: np.random.Generator, dataset: Dataset | None = None):
    """Independent Bernoulli(p_i) inclusion; the sample size is random.

    Returns a :class:`WeightedSample` when ``dataset`` is given, otherwise the
    sorted selected indices.
    """
    u = rng.random(plan.N)
    idx = np.flatnonzero((u < plan.p) & plan.eligible)
    return _sample(plan, dataset, idx, "poisson")


def _grouped_rejective(plan, rng, max_attempts):
    # exact: given the per-group counts, conditioned Poisson is uniform within groups
    elig = np.flatnonzero(plan.eligible)
    values, inverse = np.unique(plan.p[elig], return_inverse=True)
    sizes = np.bincount(inverse)
    members = [elig[inverse == g] for g in range(len(values))]
    for attempt in range(1, max_attempts + 1):
        counts = rng.binomial(sizes, values)
        if counts.sum() == plan.n:
            chosen = [m if k == len(m) else m[rng.choice(len(m), size=k, replace=False)]
                      for m, k in zip(members, counts) if k]
            return np.concatenate(chosen) if chosen else np.empty(0, np.intp), attempt
    return None, max_attempts


def _unitwise_rejective(plan, rng, max_attempts):
    elig = np.flatnonzero(plan.eligible)
    p = plan.p[elig]
    chunk = max(1, min(max_attempts, (1 << 20) // max(len(p), 1)))
    done = 0
    while done < max_attempts:
        rows = min(chunk, max_attempts - done)
        hits = rng.random((rows, len(p))) < p
        ok = np.flatnonzero(hits.sum(axis=1) == plan.n)
        if len(ok):
            r = ok[0]
            return elig[hits[r]], done + r + 1
        done += rows
    return None, max_attempts


def rejective_sample(
    plan: InclusionPlan,
    rng: np.random.Generator,
    max_attempts: int = 1000,
    dataset: Dataset | None = None,
):
    """Poisson design conditioned on ``|S| = n``, by acceptance-rejection.

    Raises
    ------
    RejectiveInfeasible
        When no Poisson draw of size ``n`` occurs within ``max_attempts``.
    """
    if max_attempts < 1:
        raise InputError("max_attempts must be at least 1")
    n_values = len(np.unique(plan.p[plan.eligible]))
    if n_values <= _MAX_GROUPS:
        idx, attempts = _grouped_rejective(plan, rng, max_attempts)
    else:
        idx, attempts = _unitwise_rejective(plan, rng, max_attempts)
    if idx is None:
        raise RejectiveInfeasible(f"rejective-infeasible: no draw of size {plan.n} in {max_attempts} attempts")
    return _sample(plan, dataset, idx, "rejective", attempts)


def pareto_sample(plan: InclusionPlan, rng: np.random.Generator, dataset: Dataset | None = None):
    """Order sampling: keep the ``n`` smallest ``U/(1-U) * (1-p)/p``; ties go to the lower index."""
    elig = np.flatnonzero(plan.eligible)
    p = plan.p[elig]
    u = rng.random(len(elig))
    with np.errstate(divide="ignore"):
        q = (u / (1.0 - u)) * ((1.0 - p) / p)
    order = np.argsort(q, kind="stable")
    return _sample(plan, dataset, elig[order[: plan.n]], "pareto")


def draw_sample(
    plan: InclusionPlan,
    dataset: Dataset,
    rng: np.random.Generator,
    design: str = "rejective",
    max_attempts: int = 1000,
) -> WeightedSample:
    """Draw with the named design; rejective falls back to Pareto when infeasible."""
    if design == "poisson":
        return poisson_sample(plan, rng, dataset)
    if design == "pareto":
        return pareto_sample(plan, rng, dataset)
    if design != "rejective":
        raise InputError(f"unknown design {design!r}; expected one of {DESIGNS}")
    try:
        return rejective_sample(plan, rng, max_attempts, dataset)
    except RejectiveInfeasible:
        logger.warning("rejective sampling infeasible after %d attempts; falling back to Pareto", max_attempts)
        return pareto_sample(plan, rng, dataset)


def exact_rejective_design(plan_or_p, n: int | None = None):
    """Enumerate the rejective design on a small population.

    Subset ``s`` with ``|s| = n`` has probability proportional to
    ``prod_{i in s} p_i prod_{j not in s} (1 - p_j)``.

    Returns
    -------
    design : list of (tuple, float)
        Every size-``n`` subset with its probability.
    inclusion : ndarray
        First-order inclusion probabilities; they sum to ``n``.
    """
    if isinstance(plan_or_p, InclusionPlan):
        p, n = plan_or_p.p, plan_or_p.n
    else:
        p = np.asarray(plan_or_p, dtype=float)
        if n is None:
            raise InputError("n is required when passing raw probabilities")
    N = len(p)
    if N > MAX_ENUMERATION_N:
        raise InputError(f"enumeration limited to N <= {MAX_ENUMERATION_N}, got N={N}")
    if not 0 <= n <= N:
        raise InputError("n must lie in [0, N]")
    with np.errstate(divide="ignore"):
        log_in, log_out = np.log(p), np.log1p(-p)
    base = log_out.sum()
    subsets = list(itertools.combinations(range(N), n))
    logw = np.array([base + sum(log_in[i] - log_out[i] for i in s) for s in subsets])
    logw -= logw.max()
    w = np.exp(logw)
    total = math.fsum(w)
    probs = w / total
    inclusion = np.zeros(N)
    for s, pr in zip(subsets, probs):
        inclusion[list(s)] += pr
    return list(zip(subsets, probs.tolist())), inclusion


def empirical_metric_rho(dataset: Dataset, f, f_prime) -> float:
    """``sqrt((1/N) sum (f(O_i) - f'(O_i))^2)`` over the whole data set.

    ``f`` and ``f_prime`` are arrays of values on every unit or callables
    taking the dataset and returning such arrays.
    """
    fv = np.asarray(f(dataset) if callable(f) else f, dtype=float)
    gv = np.asarray(f_prime(dataset) if callable(f_prime) else f_prime, dtype=float)
    return float(np.sqrt(np.mean((fv - gv) ** 2)))
