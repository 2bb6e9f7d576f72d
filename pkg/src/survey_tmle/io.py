"""CSV ingestion, h-files and report rendering."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from .data import CONTINUOUS, Dataset, SamplingFunction, WeightedSample
from .exceptions import InputError

logger = logging.getLogger(__name__)


def _label(text: str):
    """Stratum labels are ints when they look like ints, strings otherwise."""
    try:
        return int(text)
    except ValueError:
        return text.strip()


def _float_cell(text: str, row: int, col: str, path) -> float:
    if text is None or text.strip() == "":
        raise InputError(f"{path}: row {row}, column {col!r}: missing value")
    try:
        x = float(text)
    except ValueError:
        raise InputError(f"{path}: row {row}, column {col!r}: non-numeric value {text!r}") from None
    if not math.isfinite(x):
        raise InputError(f"{path}: row {row}, column {col!r}: non-finite value {text!r}")
    return x


def load_dataset(
    path,
    *,
    a_col: str = "A",
    y_col: str = "Y",
    v_col: str | None = "V",
    w_cols=None,
    exposure: str = CONTINUOUS,
    outcome_scale=None,
) -> Dataset:
    """Read a headed CSV into a :class:`Dataset`.

    ``w_cols`` defaults to every column other than the exposure, outcome and
    stratum columns. Without a stratum column (``v_col=None``, or the default
    ``"V"`` absent from the header) every row is in one stratum. Row numbers
    in error messages count the header as row 1.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if v_col is not None and v_col not in header and v_col == "V":
            v_col = None
        required = [a_col, y_col] + ([v_col] if v_col else []) + list(w_cols or [])
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}; header is {header}")
        if w_cols is None:
            w_cols = [c for c in header if c not in {a_col, y_col, v_col}]
        if not w_cols:
            raise InputError(f"{path}: no context columns")
        pos = {c: header.index(c) for c in header}
        w_rows, a, y, v = [], [], [], []
        for r, cells in enumerate(reader, start=2):
            if not cells or all(c.strip() == "" for c in cells):
                continue
            if len(cells) != len(header):
                raise InputError(f"{path}: row {r}: expected {len(header)} cells, got {len(cells)}")
            w_rows.append([_float_cell(cells[pos[c]], r, c, path) for c in w_cols])
            a.append(_float_cell(cells[pos[a_col]], r, a_col, path))
            y.append(_float_cell(cells[pos[y_col]], r, y_col, path))
            if v_col:
                cell = cells[pos[v_col]]
                if cell.strip() == "":
                    raise InputError(f"{path}: row {r}, column {v_col!r}: missing value")
                v.append(_label(cell))
    if not a:
        raise InputError(f"{path}: no data rows")
    ds = Dataset.from_arrays(np.array(w_rows), a, y, v if v_col else None, exposure_kind=exposure,
                             outcome_scale=outcome_scale, w_names=w_cols)
    hist = dict(zip(ds.stratum_domain, np.bincount(ds.v).tolist()))
    logger.info("loaded %s: N=%d, strata %s", path, ds.N, hist)
    if ds.clipped_fraction:
        logger.warning("%.3g%% of outcomes clipped into the declared range", 100 * ds.clipped_fraction)
    return ds


def write_dataset(path, dataset: Dataset, v_labels=True):
    """Export on the original outcome scale (clipped values stay clipped)."""
    lo, _ = dataset.outcome_scale
    y = dataset.y * dataset.outcome_range + lo
    names = list(dataset.w_names)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(names + ["A", "Y"] + (["V"] if v_labels else []))
        for i in range(dataset.N):
            row = [repr(float(x)) for x in dataset.w[i]] + [repr(float(dataset.a[i])), repr(float(y[i]))]
            if v_labels:
                row.append(dataset.stratum_domain[dataset.v[i]])
            out.writerow(row)


def read_h_file(path) -> SamplingFunction:
    """Two-column CSV ``stratum,h`` (a header row is optional)."""
    values = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for r, cells in enumerate(csv.reader(fh), start=1):
            if not cells:
                continue
            if len(cells) != 2:
                raise InputError(f"{path}: row {r}: expected two columns")
            if r == 1:
                try:
                    float(cells[1])
                except ValueError:
                    continue  # header
            values[_label(cells[0])] = _float_cell(cells[1], r, "h", path)
    if not values:
        raise InputError(f"{path}: no sampling-function values")
    return SamplingFunction(values)


def write_h_file(path, h: SamplingFunction):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["stratum", "h"])
        for k in sorted(h.values, key=str):
            out.writerow([k, repr(float(h.values[k]))])


def write_sample_csv(path, sample: WeightedSample):
    """Selected row indices (0-based), inclusion probabilities and HT weights ``1 / p``.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _sample_rows(csv.writer(path), sample)
        return
    with open(path, "w", newline="") as fh:
        _sample_rows(csv.writer(fh), sample)


def _sample_rows(out, sample):
    out.writerow(["index", "p", "weight"])
    for i, p in zip(sample.indices, sample.p):
        out.writerow([int(i), repr(float(p)), repr(1.0 / float(p))])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def to_json(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip float repr."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_text(path, text: str):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


def format_report(report) -> str:
    """Aligned text rendering of a :class:`TmleReport`."""
    level = round(100 * (1 - report.alpha), 6)
    level = int(level) if level == int(level) else level
    rows = [
        ("parameter", report.parameter),
        ("estimate", f"{report.psi_star:.6g}"),
        (f"{level}% CI", f"[{report.ci[0]:.6g}, {report.ci[1]:.6g}]"),
        ("Sigma_n", f"{report.sigma_n:.6g}"),
        ("Gamma_n", f"{report.gamma_n:.6g}"),
        ("score residual", f"{report.score_residual:.3g}"),
        ("n / N", f"{report.n} / {report.N}"),
        ("iterations", str(report.iterations)),
        ("converged", str(report.converged)),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


METRIC_COLUMNS = ("n", "b.", "p-val.", "c.", "v.", "e.v.")


def format_metrics(metrics) -> str:
    """One block per ``(j, h mode)`` with the columns n, b., p-val., c., v., e.v."""
    lines = []
    keys = []
    for r in metrics.rows:
        if (r.j, r.h_mode) not in keys:
            keys.append((r.j, r.h_mode))
    for j, mode in keys:
        lines.append(f"process j={j}, h={mode}")
        lines.append("".join(c.rjust(10) for c in METRIC_COLUMNS))
        for r in metrics.rows:
            if (r.j, r.h_mode) != (j, mode):
                continue
            cells = [str(r.n), f"{r.bias:.3f}", f"{r.pval:.3f}", f"{r.coverage:.3f}", f"{r.v:.4g}", f"{r.ev:.4g}"]
            lines.append("".join(c.rjust(10) for c in cells))
        lines.append("")
    lines.append("p-val.: Jarque-Bera normality test of the estimates")
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, metrics):
    fields = ["j", "h_mode", "n", "bias", "mean_error", "pval", "coverage", "v", "ev", "replicates", "failures",
              "mean_gamma", "mean_iterations"]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(fields)
        for r in metrics.rows:
            out.writerow([repr(getattr(r, f)) if isinstance(getattr(r, f), float) else getattr(r, f)
                          for f in fields])

