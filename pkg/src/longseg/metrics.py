"""Reliability and group-difference statistics on volume tables.

Sample standard deviations (``n - 1`` divisor) are used throughout.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr

from .errors import InputError, UndefinedMetricError
from .volume import LabelVolume

VOLUME_COLUMNS = ("subject", "group", "structure", "time_years", "volume_mm3", "method")


@dataclass
class VolumeSeries:
    structure: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise InputError("times and values must be 1-D and of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise InputError("times must be strictly increasing")
        if np.any(self.values < 0):
            raise InputError("volumes must be non-negative")


def cov(values) -> float:
    """Coefficient of variation in percent."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise UndefinedMetricError("coefficient of variation needs at least two values")
    m = v.mean()
    if m <= 0:
        raise UndefinedMetricError("coefficient of variation needs a positive mean")
    return float(100.0 * v.std(ddof=1) / m)


def linear_fit(s: VolumeSeries):
    """OLS intercept and slope of ``v = a + b (t - t_1)``."""
    t = s.times - s.times[0]
    v = s.values
    tm, vm = t.mean(), v.mean()
    b = float(np.sum((t - tm) * (v - vm)) / np.sum((t - tm) ** 2))
    a = float(vm - b * tm)
    return a, b


def linear_residual_ratio(s: VolumeSeries) -> float:
    """Residual standard deviation over the intercept, in percent."""
    if s.values.size < 3:
        raise UndefinedMetricError("residual ratio needs at least three timepoints")
    a, b = linear_fit(s)
    if a <= 0:
        raise UndefinedMetricError("intercept must be positive")
    resid = s.values - (a + b * (s.times - s.times[0]))
    return float(100.0 * resid.std(ddof=1) / a)


def apc(s: VolumeSeries) -> float:
    """Annualized percentage change: slope over intercept, in percent per year."""
    if s.values.size < 2:
        raise UndefinedMetricError("APC needs at least two timepoints")
    a, b = linear_fit(s)
    if a <= 0:
        raise UndefinedMetricError("intercept must be positive")
    return float(100.0 * b / a)


@dataclass
class WelchResult:
    t: float
    dof: float
    p: float
    degenerate: bool = False


def t_sf_two_sided(t, dof) -> float:
    """Two-sided tail probability of Student's t."""
    return float(2.0 * stdtr(dof, -abs(t)))


def welch_t(group_a, group_b) -> WelchResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise UndefinedMetricError("each group needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return WelchResult(0.0, float(a.size + b.size - 2), 1.0, degenerate=True)
        return WelchResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0,
                           degenerate=True)
    t = diff / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return WelchResult(float(t), float(dof), t_sf_two_sided(t, dof))


def cohens_d(group_a, group_b) -> float:
    """Mean difference over the pooled sample standard deviation."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise UndefinedMetricError("each group needs at least two values")
    pooled = math.sqrt(((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1))
                       / (a.size + b.size - 2))
    if pooled == 0:
        raise UndefinedMetricError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / pooled)


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Dice overlap of one label; 1 when both masks are empty."""
    if a.data.shape != b.data.shape:
        raise InputError("label volumes differ in shape")
    ma, mb = a.data == label, b.data == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(ma & mb)) / total


# ------------------------------------------------------------------------ tables


def read_volume_rows(paths):
    """Rows of one or more long-format volume CSVs."""
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(VOLUME_COLUMNS) <= set(reader.fieldnames):
                raise InputError(f"{path}: expected columns {', '.join(VOLUME_COLUMNS)}")
            for r in reader:
                rows.append({"subject": r["subject"], "group": r["group"], "structure": r["structure"],
                             "time_years": float(r["time_years"]), "volume_mm3": float(r["volume_mm3"]),
                             "method": r["method"]})
    if not rows:
        raise InputError("no volume rows")
    return rows


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c, "")) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def series_by_key(rows):
    """``{(method, group, subject, structure): VolumeSeries}`` sorted by time."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r["method"], r["group"], r["subject"], r["structure"])].append((r["time_years"], r["volume_mm3"]))
    out = {}
    for key, pts in sorted(acc.items()):
        pts.sort()
        out[key] = VolumeSeries(key[3], [p[0] for p in pts], [p[1] for p in pts])
    return out


def _methods(series):
    found = sorted({k[0] for k in series})
    # Cross before Long, as in the published tables
    order = {"cross": 0, "long": 1}
    return sorted(found, key=lambda m: (order.get(m.lower(), 2), m))


def _structures(series):
    seen = []
    for k in series:
        if k[3] not in seen:
            seen.append(k[3])
    return seen


def per_subject_metric(series, fn):
    """``{(method, group, subject, structure): value}``; undefined values are skipped."""
    out = {}
    for key, s in series.items():
        try:
            out[key] = fn(s)
        except UndefinedMetricError:
            continue
    return out


def _side_by_side(values, series, label):
    methods = _methods(series)
    rows = []
    for st in _structures(series):
        row = {"structure": st}
        for m in methods:
            v = [val for k, val in values.items() if k[0] == m and k[3] == st]
            row[m.capitalize()] = float(np.mean(v)) if v else ""
            row[f"{m.capitalize()}_n"] = len(v)
        rows.append(row)
    cols = ["structure"] + [m.capitalize() for m in methods] + [f"{m.capitalize()}_n" for m in methods]
    return rows, cols


def cov_table(rows):
    """Mean per-subject CoV per structure, one column per method."""
    series = series_by_key(rows)
    return _side_by_side(per_subject_metric(series, lambda s: cov(s.values)), series, "cov")


def residual_ratio_table(rows):
    """Mean per-subject residual-to-intercept ratio per structure and method."""
    series = series_by_key(rows)
    return _side_by_side(per_subject_metric(series, linear_residual_ratio), series, "ratio")


def group_table(rows):
    """APC summary, Welch test and Cohen's d for every pair of groups."""
    series = series_by_key(rows)
    values = per_subject_metric(series, apc)
    groups = sorted({k[1] for k in series})
    out = []
    for m in _methods(series):
        for st in _structures(series):
            by_group = {g: [v for k, v in values.items() if k[0] == m and k[1] == g and k[3] == st]
                        for g in groups}
            for i, ga in enumerate(groups):
                for gb in groups[i + 1:]:
                    a, b = by_group[ga], by_group[gb]
                    row = {"method": m.capitalize(), "structure": st, "group_a": ga, "group_b": gb,
                           "n_a": len(a), "n_b": len(b),
                           "apc_a": float(np.mean(a)) if a else "", "apc_b": float(np.mean(b)) if b else ""}
                    try:
                        w = welch_t(a, b)
                        row.update(t=w.t, dof=w.dof, p=w.p)
                    except UndefinedMetricError:
                        row.update(t="", dof="", p="")
                    try:
                        row["cohens_d"] = cohens_d(a, b)
                    except UndefinedMetricError:
                        row["cohens_d"] = ""
                    out.append(row)
    cols = ["method", "structure", "group_a", "group_b", "n_a", "n_b", "apc_a", "apc_b", "t", "dof", "p",
            "cohens_d"]
    return out, cols
