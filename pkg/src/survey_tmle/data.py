"""Observation data model and the Horvitz-Thompson weighted empirical measure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import InputError

BINARY = "binary"
CONTINUOUS = "continuous"


class Observation(NamedTuple):
    """A single record ``(w, a, y, v)``; ``y`` is on the rescaled [0, 1] scale."""

    w: np.ndarray
    a: float
    y: float
    v: Hashable


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def rescale_outcome(y, y_min: float, y_max: float) -> np.ndarray:
    """Affinely map ``y`` from ``[y_min, y_max]`` onto ``[0, 1]``, clipping the tails."""
    if not y_max > y_min:
        raise InputError(f"degenerate outcome range [{y_min}, {y_max}]")
    y = np.asarray(y, dtype=float)
    return np.clip((y - y_min) / (y_max - y_min), 0.0, 1.0)


@dataclass(frozen=True)
class Dataset:
    """Columnar, immutable collection of observations.

    Parameters
    ----------
    w : ndarray of shape (N, d)
        Context covariates.
    a : ndarray of shape (N,)
        Exposure. Binary data uses {0, 1}; continuous data uses 0 as the
        reference level.
    y : ndarray of shape (N,)
        Outcome rescaled to [0, 1].
    v : ndarray of shape (N,) of int
        Stratum codes indexing ``stratum_domain``.
    """

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    v: np.ndarray
    stratum_domain: tuple
    exposure_kind: str
    outcome_scale: tuple[float, float] = (0.0, 1.0)
    w_names: tuple[str, ...] = ()
    clipped_fraction: float = 0.0

    @classmethod
    def from_arrays(
        cls,
        w,
        a,
        y,
        v=None,
        *,
        exposure_kind: str = CONTINUOUS,
        outcome_scale: tuple[float, float] | None = None,
        w_names: Sequence[str] | None = None,
    ) -> "Dataset":
        """Validate raw columns and rescale the outcome.

        When ``outcome_scale`` is omitted the observed range is used, except
        that outcomes already inside [0, 1] are left untouched. Outcomes
        outside an explicit ``outcome_scale`` are clipped and the clipped
        fraction is recorded.
        """
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        a = np.asarray(a, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        N = len(y)
        if N == 0:
            raise InputError("empty dataset")
        if len(a) != N or w.shape[0] != N:
            raise InputError("columns have inconsistent lengths")
        for name, col in (("W", w), ("A", a), ("Y", y)):
            if not np.all(np.isfinite(col)):
                raise InputError(f"non-finite values in column {name}")
        if exposure_kind not in (BINARY, CONTINUOUS):
            raise InputError(f"unknown exposure kind {exposure_kind!r}")
        if exposure_kind == BINARY and not np.all((a == 0) | (a == 1)):
            raise InputError("binary exposure must take values in {0, 1}")

        if v is None:
            v = np.zeros(N, dtype=int)
        labels, codes = np.unique(np.asarray(v), return_inverse=True)
        if len(codes) != N:
            raise InputError("stratum column has inconsistent length")

        if outcome_scale is None:
            lo, hi = float(y.min()), float(y.max())
            outcome_scale = (0.0, 1.0) if lo >= 0.0 and hi <= 1.0 else (lo, hi)
        y_min, y_max = map(float, outcome_scale)
        clipped = float(np.mean((y < y_min) | (y > y_max)))
        y_scaled = rescale_outcome(y, y_min, y_max)

        if w_names is None:
            w_names = tuple(f"w{k + 1}" for k in range(w.shape[1]))
        return cls(
            w=_frozen(w),
            a=_frozen(a),
            y=_frozen(y_scaled),
            v=_frozen(codes, dtype=int),
            stratum_domain=tuple(labels.tolist()),
            exposure_kind=exposure_kind,
            outcome_scale=(y_min, y_max),
            w_names=tuple(w_names),
            clipped_fraction=clipped,
        )

    @property
    def N(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return len(self.y)

    def observation(self, i: int) -> Observation:
        return Observation(self.w[i], float(self.a[i]), float(self.y[i]), self.stratum_domain[self.v[i]])

    def stratum_frequencies(self) -> np.ndarray:
        """Full-data frequency of each stratum, ordered like ``stratum_domain``."""
        counts = np.bincount(self.v, minlength=len(self.stratum_domain))
        return counts / self.N

    @property
    def outcome_range(self) -> float:
        return self.outcome_scale[1] - self.outcome_scale[0]


def unscale_value(dataset: Dataset, x: float) -> float:
    """Map a point estimate of a linear outcome functional back to outcome units.

    The two variable-importance parameters are contrasts of conditional means,
    so the intercept of the affine map cancels and only the range matters.
    """
    return float(x) * dataset.outcome_range


def unscale_halfwidth(dataset: Dataset, half_width: float) -> float:
    return float(half_width) * dataset.outcome_range


@dataclass(frozen=True)
class SamplingFunction:
    """Positive stratum-level sampling function ``h``.

    ``values`` maps stratum labels to ``h(v)``; unlisted strata raise.
    """

    values: Mapping[Hashable, float]

    def __post_init__(self):
        bad = {k: x for k, x in self.values.items() if not (np.isfinite(x) and x > 0)}
        if bad:
            raise InputError(f"sampling function must be positive, got {bad}")

    @classmethod
    def uniform(cls, domain: Sequence[Hashable]) -> "SamplingFunction":
        return cls({v: 1.0 for v in domain})

    @property
    def floor(self) -> float:
        return min(self.values.values())

    def by_code(self, dataset: Dataset) -> np.ndarray:
        """``h`` per stratum code of ``dataset``."""
        try:
            return np.array([float(self.values[label]) for label in dataset.stratum_domain])
        except KeyError as exc:
            raise InputError(f"no sampling-function value for stratum {exc.args[0]!r}") from None

    def evaluate(self, dataset: Dataset) -> np.ndarray:
        return self.by_code(dataset)[dataset.v]

    def empirical_mean(self, dataset: Dataset) -> float:
        return float(self.by_code(dataset) @ dataset.stratum_frequencies())


@dataclass(frozen=True)
class InclusionPlan:
    """Per-unit inclusion probabilities ``p_i = n h(V_i) / N`` for one dataset.

    Units outside ``eligible`` (for instance pilot rows) are never drawn;
    their ``p`` entry is kept for bookkeeping only.
    """

    n: int
    p: np.ndarray
    h: np.ndarray
    N: int
    clip_eps: float
    eligible: np.ndarray
    n_clipped: int = 0

    @property
    def d_N(self) -> float:
        p = self.p[self.eligible]
        return float(np.sum(p * (1.0 - p)))


@dataclass(frozen=True)
class WeightedSample:
    """A drawn sub-sample: selected indices plus their design quantities.

    Stores indices into the (immutable) dataset rather than copies.
    """

    dataset: Dataset
    indices: np.ndarray
    p: np.ndarray
    h: np.ndarray
    n: int
    design: str = "rejective"
    attempts: int | None = field(default=None, compare=False)

    @classmethod
    def from_plan(cls, plan: InclusionPlan, dataset: Dataset, indices, design: str, attempts=None):
        idx = np.sort(np.asarray(indices, dtype=np.intp))
        return cls(dataset, _frozen(idx, np.intp), _frozen(plan.p[idx]), _frozen(plan.h[idx]),
                   plan.n, design, attempts)

    @classmethod
    def full(cls, dataset: Dataset) -> "WeightedSample":
        """Every unit with ``p = 1``; the HT measure is then the empirical measure."""
        N = dataset.N
        return cls(dataset, _frozen(np.arange(N), np.intp), _frozen(np.ones(N)), _frozen(np.ones(N)),
                   N, "census")

    @property
    def N(self) -> int:
        return self.dataset.N

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def ht_weights(self) -> np.ndarray:
        """Mass ``1 / (N p_i)`` of each selected unit."""
        return 1.0 / (self.N * self.p)

    # column views restricted to the selection
    @property
    def w(self) -> np.ndarray:
        return self.dataset.w[self.indices]

    @property
    def a(self) -> np.ndarray:
        return self.dataset.a[self.indices]

    @property
    def y(self) -> np.ndarray:
        return self.dataset.y[self.indices]

    @property
    def v(self) -> np.ndarray:
        return self.dataset.v[self.indices]


def ht_integral(sample: WeightedSample, f: Callable[[Observation], float] | np.ndarray) -> float:
    """Integral of ``f`` against the HT empirical measure.

    Returns ``(1/N) sum_{i in S} f(O_i) / p_i``. ``f`` is either a callable on
    :class:`Observation` or an array of its values on the selected units, in
    the order of ``sample.indices``. Accumulation is exact-rounded
    (``math.fsum``) because the weights span orders of magnitude.

    Unclipped units use the equivalent form ``f / (n h)``, so that a constant
    sampling function integrates constants without rounding error.
    """
    if callable(f):
        values = np.array([f(sample.dataset.observation(i)) for i in sample.indices], dtype=float)
    else:
        values = np.broadcast_to(np.asarray(f, dtype=float), (sample.size,))
    scaled = sample.N * sample.p / sample.n
    unclipped = np.isclose(scaled, sample.h, rtol=1e-12, atol=0.0)
    return math.fsum(values / np.where(unclipped, sample.h, scaled)) / sample.n


def ht_marginal_w(sample: WeightedSample) -> tuple[np.ndarray, np.ndarray]:
    """Atoms ``W_i`` (i in S) and their HT masses ``1 / (N p_i)``."""
    return sample.w, sample.ht_weights


def sample_from_arrays(
    X,
    a,
    y,
    v=None,
    *,
    inclusion_prob=None,
    population_size=None,
    sampling_h=None,
    outcome_scale=None,
    exposure_kind=CONTINUOUS,
) -> WeightedSample:
    """Wrap arrays of already-sampled units as a :class:`WeightedSample`.

    Without ``inclusion_prob`` the units are treated as a census of an i.i.d.
    sample (``p = 1``, ``N = n``). With it, ``population_size`` is required and
    ``sampling_h`` defaults to ``N p / n``.
    """
    ds = Dataset.from_arrays(X, a, y, v, exposure_kind=exposure_kind, outcome_scale=outcome_scale)
    n = ds.N
    if inclusion_prob is None:
        return WeightedSample.full(ds)
    if population_size is None:
        raise InputError("population_size is required with inclusion_prob")
    p = np.asarray(inclusion_prob, dtype=float).ravel()
    if len(p) != n or np.any(p <= 0) or np.any(p > 1):
        raise InputError("inclusion_prob must have one entry in (0, 1] per unit")
    N = int(population_size)
    h = p * N / n if sampling_h is None else np.asarray(sampling_h, dtype=float).ravel()
    # the HT weights need the population size, which the sub-sample dataset lacks
    return _PopulationSample(ds, _frozen(np.arange(n), np.intp), _frozen(p), _frozen(h), n, "external",
                             population_N=N)


@dataclass(frozen=True)
class _PopulationSample(WeightedSample):
    population_N: int = 0

    @property
    def N(self) -> int:
        return self.population_N


def bucketize(v, edges) -> np.ndarray:
    """Integer stratum labels for a continuous summary ``v`` cut at ``edges``.

    Label ``k`` collects values in ``[edges[k-1], edges[k])``, so there are
    ``len(edges) + 1`` possible strata.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or np.any(np.diff(edges) <= 0):
        raise InputError("bucket edges must be strictly increasing")
    return np.digitize(np.asarray(v, dtype=float), edges)
