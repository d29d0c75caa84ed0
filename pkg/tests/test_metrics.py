import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avemo.metrics import (
    EvalReport,
    accuracy,
    ccc,
    ccc_stats,
    confusion_matrix,
    evaluate,
    macro_f1,
    per_class_f1,
    total_expr,
    total_va,
)


def ccc_oracle(x, y):
    """Concordance correlation written out term by term with population moments."""
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    vx = math.fsum((a - mx) ** 2 for a in x) / n
    vy = math.fsum((b - my) ** 2 for b in y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    denom = vx + vy + (mx - my) ** 2
    return 0.0 if denom < 1e-12 else 2 * sxy / denom


def f1_oracle(pred, gold, n_classes):
    """Macro-F1 from precision and recall with exact fractions."""
    scores = []
    for c in range(n_classes):
        tp = sum(p == c and g == c for p, g in zip(pred, gold))
        n_pred = sum(p == c for p in pred)
        n_gold = sum(g == c for g in gold)
        if tp == 0:
            scores.append(Fraction(0))
            continue
        prec, rec = Fraction(tp, n_pred), Fraction(tp, n_gold)
        scores.append(2 * prec * rec / (prec + rec))
    return sum(scores) / n_classes


@pytest.mark.parametrize(
    "x, y, expected",
    [([0, 1, 2], [0, 1, 2], 1.0), ([-1, 0, 1], [1, 0, -1], -1.0), ([0, 1, 2], [0, 1, 1], 2 / 3)],
)
def test_ccc_hand_cases(x, y, expected):
    assert ccc(x, y) == pytest.approx(expected, abs=1e-15)


def test_ccc_hand_case_moments():
    s = ccc_stats([0, 1, 2], [0, 1, 1])
    assert s.cov_xy == pytest.approx(1 / 3)
    assert s.var_x == pytest.approx(2 / 3)
    assert s.var_y == pytest.approx(2 / 9)
    assert (s.mean_x - s.mean_y) ** 2 == pytest.approx(1 / 9)


def test_ccc_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        x = rng.normal(rng.normal(), rng.uniform(0.1, 3), n)
        y = rng.normal(rng.normal(), rng.uniform(0.1, 3), n)
        worst = max(worst, abs(ccc(x, y) - ccc_oracle(list(x), list(y))))
    assert worst < 1e-12


def test_ccc_constant_equal_series_is_zero():
    assert ccc([0.3, 0.3, 0.3], [0.3, 0.3, 0.3]) == 0.0


def test_ccc_contract_errors():
    with pytest.raises(ValueError):
        ccc([1.0], [1.0])
    with pytest.raises(ValueError):
        ccc([1.0, 2.0], [1.0, 2.0, 3.0])


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 30).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite), arrays(float, n, elements=finite))))
def test_ccc_properties(pair):
    x, y = pair
    r = ccc(x, y)
    assert -1 - 1e-9 <= r <= 1 + 1e-9
    assert r == pytest.approx(ccc(y, x), abs=1e-12)
    sx, sy = x.std(), y.std()
    if sx > 1e-6 and sy > 1e-6:
        pearson = np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)
        assert abs(r) <= abs(pearson) + 1e-9


def test_ccc_penalises_mean_shift():
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    assert ccc(x, x) == pytest.approx(1.0)
    values = [ccc(x, x + c) for c in (0.1, 0.5, 2.0)]
    assert values[0] > values[1] > values[2]


def test_macro_f1_hand_cases():
    assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1], n_classes=2) == pytest.approx(0.5)
    gold = list(range(7))
    assert macro_f1([0] * 7, gold) == pytest.approx(1 / 28)
    assert macro_f1(gold, gold) == 1.0


def test_macro_f1_matches_fraction_oracle():
    rng = np.random.default_rng(9)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        pred, gold = rng.integers(0, 7, n), rng.integers(0, 7, n)
        assert macro_f1(pred, gold) == pytest.approx(float(f1_oracle(list(pred), list(gold), 7)), abs=1e-12)


def test_absent_class_counts_as_zero():
    # only classes 0 and 1 occur; the other five add zero to the mean
    assert macro_f1([0, 1], [0, 1]) == pytest.approx(2 / 7)


def test_weighted_average():
    pred, gold = [0, 0, 0, 1], [0, 0, 1, 1]
    f1 = per_class_f1(pred, gold, 2)
    assert macro_f1(pred, gold, 2, average="weighted") == pytest.approx((2 * f1[0] + 2 * f1[1]) / 4)
    with pytest.raises(ValueError):
        macro_f1(pred, gold, 2, average="micro")


def test_confusion_matrix_orientation():
    cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]


@pytest.mark.parametrize("pred, gold, expected", [([1, 2, 3], [1, 2, 3], 1.0), ([0, 0], [1, 1], 0.0), ([1, 2, 3, 4], [1, 2, 3, 0], 0.75)])
def test_accuracy(pred, gold, expected):
    assert accuracy(pred, gold) == expected


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        macro_f1([], [])


@pytest.mark.parametrize(
    "f1, acc, expected, tol",
    [(0.30, 0.50, 0.366, 1e-12), (0.453, 0.584, 0.496, 0.001), (0.375, 0.495, 0.415, 0.002), (1.0, 1.0, 1.0, 1e-12)],
)
def test_total_expr(f1, acc, expected, tol):
    assert abs(total_expr(f1, acc) - expected) <= tol


@pytest.mark.parametrize("v, a, expected, tol", [(0.23, 0.21, 0.22, 1e-12), (0.243, 0.400, 0.322, 0.001), (1.0, 1.0, 1.0, 0)])
def test_total_va(v, a, expected, tol):
    assert abs(total_va(v, a) - expected) <= tol


def test_evaluate_expr_drops_sentinels():
    report = evaluate("expr", [0, 1, 5, 2], [0, 1, -1, 2])
    assert report.n_frames == 3
    assert report.accuracy == 1.0
    assert report.is_consistent()


def test_evaluate_va_flags_degenerate():
    pred = np.array([[0.1, 0.2], [0.1, 0.5], [0.1, 0.1]])
    gold = np.array([[0.1, 0.2], [0.1, 0.5], [-5, -5]])
    report = evaluate("va", pred, gold)
    assert report.n_frames == 2
    assert report.degenerate == ["valence"]
    assert report.ccc_v == 0.0 and report.ccc_a == pytest.approx(1.0)
    assert report.is_consistent()


def test_per_video_breakdown():
    videos = {"b": ([0, 1], [0, 1]), "a": ([0, 0], [1, 1])}
    report = evaluate("expr", [0, 0, 0, 1], [1, 1, 0, 1], videos)
    assert list(report.per_video) == ["a", "b"]
    assert report.per_video["a"]["accuracy"] == 0.0
    assert report.per_video["b"]["accuracy"] == 1.0
    assert isinstance(report.to_dict(), dict)


def test_report_inconsistency_detected():
    assert not EvalReport("expr", 3, macro_f1=0.3, accuracy=0.5, total_expr=0.4).is_consistent()
