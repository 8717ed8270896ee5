import math

import mpmath
import numpy as np
import pytest

from longseg import metrics
from longseg.errors import InputError, UndefinedMetricError
from longseg.metrics import (VolumeSeries, apc, cohens_d, cov, dice, linear_residual_ratio, t_sf_two_sided,
                             welch_t)
from longseg.volume import LabelVolume

# two-sided Student t tail probabilities, 50-digit mpmath evaluation of the
# regularized incomplete beta function I_{nu/(nu+t^2)}(nu/2, 1/2)
T_TABLE = [
    (0.5, 3.0, 0.65144796484815110744),
    (-1.7, 5.5, 0.1445286697661793359),
    (2.2281388519649, 10.0, 0.050000000001811928533),
    (-2.8284271247461903, 6.0, 0.030019745287544393727),
    (4.0, 2.5, 0.039012975841318249412),
    (1.0, 30.0, 0.32530861542603010966),
]


def series(values, times=None):
    return VolumeSeries("s", times if times is not None else list(range(len(values))), values)


def test_cov_examples():
    assert cov([5, 5, 5]) == 0.0
    assert cov([9, 11]) == pytest.approx(100 * math.sqrt(2) / 10, abs=1e-10)
    with pytest.raises(UndefinedMetricError):
        cov([3.0])


def test_cov_random_oracle():
    rng = np.random.default_rng(0)
    v = rng.uniform(10, 20, size=7)
    m = sum(v) / 7
    sd = math.sqrt(sum((x - m) ** 2 for x in v) / 6)
    assert cov(v) == pytest.approx(100 * sd / m, rel=1e-12)


def test_residual_ratio_examples():
    assert linear_residual_ratio(series([1.0, 2.0, 3.0, 4.0])) == pytest.approx(0.0, abs=1e-12)
    # a = 9.5, b = 1.5, residuals (0.5, -1, 0.5)
    sd = math.sqrt((0.25 + 1 + 0.25) / 2)
    assert linear_residual_ratio(series([10, 10, 13])) == pytest.approx(100 * sd / 9.5, abs=1e-10)
    assert metrics.linear_fit(series([10, 10, 13])) == pytest.approx((9.5, 1.5), abs=1e-12)


def test_residual_ratio_time_shift():
    v = [10.0, 11.0, 13.0, 12.5]
    a = linear_residual_ratio(series(v, [0, 1, 2, 3.5]))
    b = linear_residual_ratio(series(v, [7, 8, 9, 10.5]))
    assert a == pytest.approx(b, rel=1e-12)


def test_residual_ratio_needs_three_points():
    with pytest.raises(UndefinedMetricError):
        linear_residual_ratio(series([1.0, 2.0]))


def test_apc_examples():
    assert apc(series([7.0, 7.0, 7.0])) == 0.0
    assert apc(series([100.0, 98.0])) == pytest.approx(-2.0, abs=1e-10)
    v = [100.0, 97.0, 95.5, 91.0]
    assert apc(series([3 * x for x in v])) == pytest.approx(apc(series(v)), rel=1e-12)


def test_series_validation():
    with pytest.raises(InputError):
        series([1.0, 2.0], [1.0, 1.0])
    with pytest.raises(InputError):
        series([1.0, -2.0])


def test_welch_identical_groups():
    w = welch_t([1, 2, 3], [1, 2, 3])
    assert w.t == 0.0 and w.p == pytest.approx(1.0, abs=1e-12)


def test_welch_hand_computation():
    # means 2.5 and 4.5, sample variances 5/3 each, n = 4
    w = welch_t([1, 2, 3, 4], [3, 4, 5, 6])
    assert w.t == pytest.approx(-2.0 / math.sqrt(5 / 6), abs=1e-10)
    assert w.dof == pytest.approx(6.0, abs=1e-10)


def test_welch_unequal_variances():
    a, b = [1.0, 2.0, 4.0, 8.0], [2.0, 2.5, 3.0]
    va, vb = np.var(a, ddof=1) / 4, np.var(b, ddof=1) / 3
    w = welch_t(a, b)
    assert w.t == pytest.approx((np.mean(a) - np.mean(b)) / math.sqrt(va + vb), abs=1e-10)
    assert w.dof == pytest.approx((va + vb) ** 2 / (va ** 2 / 3 + vb ** 2 / 2), abs=1e-10)


def test_welch_degenerate():
    w = welch_t([1, 1], [2, 2])
    assert w.degenerate and w.t == -math.inf and w.p == 0.0
    with pytest.raises(UndefinedMetricError):
        welch_t([1.0], [2.0, 3.0])


@pytest.mark.parametrize("t,dof,p", T_TABLE)
def test_t_tail_against_reference_table(t, dof, p):
    assert t_sf_two_sided(t, dof) == pytest.approx(p, abs=1e-6)


def test_reference_table_is_consistent():
    mpmath.mp.dps = 30
    for t, dof, p in T_TABLE:
        ref = mpmath.betainc(dof / 2, 0.5, 0, dof / (dof + t * t), regularized=True)
        assert float(ref) == pytest.approx(p, rel=1e-15)


def test_cohens_d():
    assert cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    assert cohens_d([1, 2, 3], [2, 3, 4]) == pytest.approx(-1.0, abs=1e-10)
    with pytest.raises(UndefinedMetricError):
        cohens_d([0, 0], [1, 1])


def test_dice():
    a = np.zeros((4, 4, 4), int)
    a[:2] = 1
    b = np.zeros((4, 4, 4), int)
    b[1:3] = 1
    la, lb = LabelVolume(a, (1, 1, 1), 2), LabelVolume(b, (1, 1, 1), 2)
    assert dice(la, la, 1) == 1.0
    assert dice(la, LabelVolume(1 - a, (1, 1, 1), 2), 1) == 0.0
    assert dice(la, lb, 1) == 0.5
    assert dice(la, lb, 7) == 1.0


def _rows(values, method="cross", group="g", subject="s1", structure="wm"):
    return [{"subject": subject, "group": group, "structure": structure, "time_years": float(t),
             "volume_mm3": float(v), "method": method} for t, v in enumerate(values)]


def test_cov_table_constant_and_layout():
    rows = _rows([5, 5, 5]) + _rows([5, 5, 5], method="long")
    table, cols = metrics.cov_table(rows)
    assert cols[:3] == ["structure", "Cross", "Long"]
    assert table == [{"structure": "wm", "Cross": 0.0, "Long": 0.0, "Cross_n": 1, "Long_n": 1}]


def test_group_table_welch_and_d():
    rows = []
    apcs = {"a": [-1.0, -1.5, -0.5], "b": [-4.0, -3.0, -5.0]}
    for g, vals in apcs.items():
        for i, r in enumerate(vals):
            rows += _rows([100.0, 100.0 + r], group=g, subject=f"{g}{i}")
    table, _ = metrics.group_table(rows)
    (row,) = table
    w = welch_t(apcs["a"], apcs["b"])
    assert row["t"] == pytest.approx(w.t, rel=1e-10)
    assert row["cohens_d"] == pytest.approx(cohens_d(apcs["a"], apcs["b"]), rel=1e-10)


def test_csv_roundtrip_and_schema(tmp_path):
    rows = _rows([1.5, 2.5])
    p = tmp_path / "v.csv"
    metrics.write_rows(p, rows, metrics.VOLUME_COLUMNS)
    assert metrics.read_volume_rows([p]) == rows
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        metrics.read_volume_rows([bad])
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(metrics.VOLUME_COLUMNS) + "\n")
    with pytest.raises(InputError):
        metrics.read_volume_rows([empty])
