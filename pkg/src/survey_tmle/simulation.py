"""Synthetic data-generating processes and the Monte Carlo study harness.

Three processes share the law of ``(V, W, A)`` and the conditional mean of
``Y`` and differ only in the per-stratum outcome standard deviation, so they
share the same true variable-importance value.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .data import CONTINUOUS, Dataset, SamplingFunction, WeightedSample
from .exceptions import EstimationError, InputError, SurveyTmleError
from .rng import make_rng

logger = logging.getLogger(__name__)

PSI0_REFERENCE = 0.1204
STRATUM_PROBS = (1 / 6, 1 / 3, 1 / 2)
STRATUM_MEANS = ((0.0, 0.0), (1.0, 0.5), (0.5, 1.0))
STRATUM_COVS = (
    ((1.0, -0.2), (-0.2, 1.0)),
    ((0.5, 0.1), (0.1, 0.5)),
    ((1.0, 0.0), (0.0, 1.0)),
)
OUTCOME_SDS = {1: (1.5, 1.0, 0.5), 2: (1.0, 5.0, 10.0), 3: (50.0, 10.0, 1.0)}
# 0.001 / 0.999 quantiles of Y from a 10^6-draw calibration run per process
# (seed 20240101); regenerate with calibrate_outcome_range
OUTCOME_RANGES = {
    1: (-6.616202096030808, 11.420402512986916),
    2: (-26.94472208081415, 31.844560487823767),
    3: (-123.54749108442117, 125.98904566521638),
}
W_NAMES = ("w1", "w2")


@dataclass(frozen=True)
class DgpSpec:
    """One of the three study processes, indexed by ``j``."""

    j: int
    stratum_probs: tuple = STRATUM_PROBS
    means: tuple = STRATUM_MEANS
    covs: tuple = STRATUM_COVS
    thresholds: tuple = (1.1, 0.8)
    zero_probs: tuple = (0.8, 0.1)
    outcome_sds: tuple = ()

    def __post_init__(self):
        if self.j not in OUTCOME_SDS:
            raise InputError(f"unknown process j={self.j}; expected 1, 2 or 3")
        if not self.outcome_sds:
            object.__setattr__(self, "outcome_sds", OUTCOME_SDS[self.j])
        if abs(sum(self.stratum_probs) - 1.0) > 1e-12 or min(self.outcome_sds) <= 0:
            raise InputError("invalid process specification")

    @property
    def outcome_range(self) -> tuple[float, float]:
        return OUTCOME_RANGES[self.j]


def outcome_mean(a, w1, w2):
    return a * (w1 + w2) / 6.0 + w1 + w2 / 4.0 + np.exp((w1 + w2) / 10.0)


def noncentrality(w1, w2):
    return np.sqrt((w1 - 1.1) ** 2 + (w2 - 0.8) ** 2)


def draw_raw(spec: DgpSpec, size: int, rng: np.random.Generator):
    """``(V, W, A, Y)`` arrays on the original outcome scale; ``V`` in {1, 2, 3}."""
    v = rng.choice(3, size=size, p=spec.stratum_probs)
    z = rng.standard_normal((size, 2))
    w = np.empty((size, 2))
    for k in range(3):
        sel = v == k
        chol = np.linalg.cholesky(np.asarray(spec.covs[k]))
        w[sel] = np.asarray(spec.means[k]) + z[sel] @ chol.T
    w1, w2 = w[:, 0], w[:, 1]
    corner = (w1 >= spec.thresholds[0]) & (w2 >= spec.thresholds[1])
    p_zero = np.where(corner, spec.zero_probs[0], spec.zero_probs[1])
    is_zero = rng.random(size) < p_zero
    # noncentral chi-square with one degree of freedom
    a = 1.0 + (rng.standard_normal(size) + np.sqrt(noncentrality(w1, w2))) ** 2
    a[is_zero] = 0.0
    sd = np.asarray(spec.outcome_sds)[v]
    y = outcome_mean(a, w1, w2) + sd * rng.standard_normal(size)
    return v + 1, w, a, y


def draw_observation(spec: DgpSpec, rng: np.random.Generator):
    """A single ``(w, a, y, v)`` tuple on the original outcome scale."""
    v, w, a, y = draw_raw(spec, 1, rng)
    return w[0], float(a[0]), float(y[0]), int(v[0])


def draw_dataset(spec: DgpSpec, N: int, rng: np.random.Generator) -> Dataset:
    """``N`` observations rescaled with the process's fixed outcome range."""
    v, w, a, y = draw_raw(spec, N, rng)
    return Dataset.from_arrays(w, a, y, v, exposure_kind=CONTINUOUS, outcome_scale=spec.outcome_range,
                               w_names=W_NAMES)


def calibrate_outcome_range(spec: DgpSpec, draws: int = 10**6, seed: int = 20240101):
    """0.001 / 0.999 empirical quantiles of ``Y``; the source of ``OUTCOME_RANGES``."""
    _, _, _, y = draw_raw(spec, draws, make_rng(seed, spec.j))
    lo, hi = np.quantile(y, [0.001, 0.999])
    return float(lo), float(hi)


def true_psi_c(spec: DgpSpec | None = None, validate: bool = False, draws: int = 10**7, seed: int = 0,
               chunk: int = 10**6) -> float:
    """True value of the continuous variable importance.

    Returns the reference value, or with ``validate`` a Monte Carlo
    recomputation of ``E[A^2 (W1 + W2) / 6] / E[A^2]``, which does not
    depend on the outcome noise and hence not on ``j``.
    """
    if not validate:
        return PSI0_REFERENCE
    spec = spec or DgpSpec(1)
    num = den = 0.0
    done = 0
    rng = make_rng(seed, 7)
    while done < draws:
        m = min(chunk, draws - done)
        _, w, a, _ = draw_raw(spec, m, rng)
        a2 = a * a
        num += math.fsum(a2 * (w[:, 0] + w[:, 1]) / 6.0)
        den += math.fsum(a2)
        done += m
    return num / den


# nuisance settings for the study: a 0.05 floor on g(0 | w) and per-stratum outcome fits
STUDY_ESTIMATOR = {"g_min": 0.05, "stratify": "outcome"}
H_MODES = ("uniform", "pilot")
MAX_FAILURE_RATE = 0.02
MAX_FRACTION = 0.05


def normality_diagnostic(estimates) -> float:
    """Jarque-Bera p-value of the estimates (at least 20).

    Constant input has no defined statistic; it returns 0 and warns.
    """
    x = np.asarray(estimates, dtype=float)
    if len(x) < 20:
        raise InputError(f"normality diagnostic needs at least 20 estimates, got {len(x)}")
    if np.ptp(x) == 0:
        warnings.warn("constant estimates: normality p-value set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(stats.jarque_bera(x).pvalue)


@dataclass(frozen=True)
class StudyConfig:
    """Monte Carlo study settings.

    ``estimator`` holds keyword arguments for :class:`ContinuousTMLE`.
    """

    dgps: tuple = (1, 2, 3)
    N: int = 200_000
    B: int = 200
    n_grid: tuple = (500, 2000, 5000)
    h_modes: tuple = H_MODES
    seed: int = 0
    n0: int = 1000
    design: str = "rejective"
    max_attempts: int = 1000
    threads: int = 1
    allow_large_fraction: bool = False
    alpha: float = 0.05
    estimator: dict = field(default_factory=lambda: dict(STUDY_ESTIMATOR))

    def validate(self):
        bad_modes = set(self.h_modes) - set(H_MODES)
        if bad_modes:
            raise InputError(f"unknown h modes {sorted(bad_modes)}")
        for j in self.dgps:
            DgpSpec(j)
        if self.B < 1 or self.N < 2:
            raise InputError("B and N must be positive")
        too_large = [n for n in self.n_grid if n / self.N > MAX_FRACTION]
        if too_large and not self.allow_large_fraction:
            raise InputError(f"n/N > {MAX_FRACTION} for n in {too_large}; pass allow_large_fraction to proceed")
        if "pilot" in self.h_modes and self.n0 + max(self.n_grid) >= self.N:
            raise InputError("pilot plus main sample must be smaller than N")


@dataclass(frozen=True)
class MetricRow:
    """Aggregates for one ``(j, h mode, n)`` arm, in original outcome units."""

    j: int
    h_mode: str
    n: int
    bias: float
    mean_error: float
    pval: float
    coverage: float
    v: float
    ev: float
    replicates: int
    failures: int
    mean_gamma: float
    mean_iterations: float


@dataclass
class StudyMetrics:
    rows: list
    replicates: list
    pilot_h: list
    config: StudyConfig
    psi0: float = PSI0_REFERENCE

    def row(self, j: int, h_mode: str, n: int) -> MetricRow:
        for r in self.rows:
            if (r.j, r.h_mode, r.n) == (j, h_mode, n):
                return r
        raise KeyError((j, h_mode, n))

    def to_dict(self):
        cfg = asdict(self.config)
        cfg.pop("threads")  # output must not depend on the worker count
        return {"psi0": self.psi0, "config": cfg, "rows": [asdict(r) for r in self.rows],
                "pilot_h": self.pilot_h}


def _fit_record(sample: WeightedSample, params: dict, alpha: float) -> dict:
    from .tmle_continuous import ContinuousTMLE

    r = ContinuousTMLE(alpha=alpha, **params).fit_sample(sample).report_
    return {"psi": r.psi_star, "sigma_n": r.sigma_n, "lo": r.ci[0], "hi": r.ci[1], "gamma": r.gamma_n,
            "iterations": r.iterations, "converged": r.converged, "error": None}


def run_replicate(config: StudyConfig, j: int, b: int) -> tuple[list, dict | None]:
    """One data set: every arm of the study. Streams are keyed by ``(seed, j, b, ...)``."""
    from .design import run_pilot
    from .sampling import draw_sample, make_plan

    spec = DgpSpec(j)
    ds = draw_dataset(spec, config.N, make_rng(config.seed, j, b, 0))
    records = []

    def attempt(mode, n, h, exclude, stream):
        base = {"j": j, "b": b, "h_mode": mode, "n": n}
        try:
            plan = make_plan(ds, h, n, exclude=exclude)
            sample = draw_sample(plan, ds, make_rng(config.seed, j, b, stream, n), config.design,
                                 config.max_attempts)
            records.append({**base, **_fit_record(sample, config.estimator, config.alpha)})
        except SurveyTmleError as exc:
            records.append({**base, "error": f"{type(exc).__name__}: {exc}"})

    pilot = None
    if "uniform" in config.h_modes:
        h = SamplingFunction.uniform(ds.stratum_domain)
        for n in config.n_grid:
            attempt("uniform", n, h, None, 1)
    if "pilot" in config.h_modes:
        try:
            pr = run_pilot(ds, config.n0, CONTINUOUS, make_rng(config.seed, j, b, 2),
                           estimator_params=config.estimator, design=config.design)
            pilot = {"j": j, "b": b, "h": {str(k): v for k, v in pr.h_opt.values.items()},
                     "imputed": list(map(str, pr.imputed_strata))}
            for n in config.n_grid:
                attempt("pilot", n, pr.h_opt, pr.pilot_indices, 3)
        except SurveyTmleError as exc:
            for n in config.n_grid:
                records.append({"j": j, "b": b, "h_mode": "pilot", "n": n, "error": f"pilot failed: {exc}"})
    return records, pilot


def _run_chunk(args):
    from threadpoolctl import threadpool_limits

    config, tasks = args
    with threadpool_limits(1):
        return [run_replicate(config, j, b) for j, b in tasks]


def aggregate(records: list, config: StudyConfig, psi0: float = PSI0_REFERENCE) -> list:
    rows = []
    for j in config.dgps:
        for mode in config.h_modes:
            for n in config.n_grid:
                arm = [r for r in records if (r["j"], r["h_mode"], r["n"]) == (j, mode, n)]
                ok = [r for r in arm if r.get("error") is None]
                psi = np.array([r["psi"] for r in ok])
                if len(ok) == 0:
                    rows.append(MetricRow(j, mode, n, *([float("nan")] * 6), 0, len(arm), float("nan"),
                                          float("nan")))
                    continue
                covered = [r["lo"] <= psi0 <= r["hi"] for r in ok]
                rows.append(MetricRow(
                    j=j, h_mode=mode, n=n,
                    bias=float(np.mean(np.abs(psi - psi0))),
                    mean_error=float(np.mean(psi - psi0)),
                    pval=normality_diagnostic(psi) if len(psi) >= 20 else float("nan"),
                    coverage=float(np.mean(covered)),
                    v=float(n * np.var(psi)),
                    ev=float(np.mean([r["sigma_n"] for r in ok])),
                    replicates=len(ok),
                    failures=len(arm) - len(ok),
                    mean_gamma=float(np.mean([r["gamma"] for r in ok])),
                    mean_iterations=float(np.mean([r["iterations"] for r in ok])),
                ))
    return rows


def run_study(config: StudyConfig) -> StudyMetrics:
    """Run every replicate and aggregate the metric table.

    Replicates are distributed over ``config.threads`` processes; results are
    identical for any worker count because each replicate owns its random
    streams and aggregation runs in a fixed order.

    Raises
    ------
    EstimationError
        When more than 2% of the fits in any arm failed.
    """
    config.validate()
    tasks = [(j, b) for j in config.dgps for b in range(config.B)]
    if config.threads <= 1:
        results = _run_chunk((config, tasks))
    else:
        from concurrent.futures import ProcessPoolExecutor

        size = max(1, math.ceil(len(tasks) / (4 * config.threads)))
        chunks = [tasks[i:i + size] for i in range(0, len(tasks), size)]
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = [rep for part in pool.map(_run_chunk, [(config, c) for c in chunks]) for rep in part]
    records = [r for recs, _ in results for r in recs]
    pilots = [p for _, p in results if p is not None]
    metrics = StudyMetrics(aggregate(records, config), records, pilots, config)
    for row in metrics.rows:
        total = row.replicates + row.failures
        if total and row.failures / total > MAX_FAILURE_RATE:
            raise EstimationError(
                f"{row.failures}/{total} fits failed for j={row.j}, h={row.h_mode}, n={row.n}",
                {"metrics": metrics},
            )
    return metrics
