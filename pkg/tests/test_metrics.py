import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import trapezoid_auc
from stmixer.metrics import (REPORT_COLUMNS, EvalReport, accuracy, build_report, cohen_kappa,
                             macro_ovr_auc, roc_auc)


def random_binary(rng, n):
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    # coarse scores so ties actually occur
    return np.round(rng.random(n), int(rng.integers(1, 4))), rng.permutation(y)


def test_auc_perfect():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_reversed():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


def test_auc_all_ties():
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_hand_counted():
    # positives 0.8, 0.4; negatives 0.6, 0.4, 0.1 -> pairs: 1 + 1 + 1 | 0 + 0.5 + 1 = 4.5 / 6
    assert roc_auc([0.8, 0.4, 0.6, 0.4, 0.1], [1, 1, 0, 0, 0]) == 0.75


def test_auc_single_class_fails():
    with pytest.raises(ValueError, match="both classes"):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_trapezoid_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, y = random_binary(rng, int(rng.integers(2, 40)))
        assert abs(roc_auc(s, y) - trapezoid_auc(s, y)) < 1e-9


def test_auc_random_20_point():
    rng = np.random.default_rng(20)
    s, y = random_binary(rng, 20)
    assert roc_auc(s, y) == pytest.approx(trapezoid_auc(s, y), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s, y = random_binary(rng, 25)
    base = roc_auc(s, y)
    for f in (lambda x: 3 * x - 7, np.exp, lambda x: x ** 3, lambda x: np.arctan(10 * x)):
        assert roc_auc(f(s), y) == base


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_auc_complement(seed):
    rng = np.random.default_rng(seed)
    s, y = random_binary(rng, 25)
    assert abs(roc_auc(s, y) + roc_auc(s, 1 - y) - 1) < 1e-12


def test_macro_ovr_perfect_and_uniform():
    y = np.array([0, 1, 2, 0, 1, 2])
    assert macro_ovr_auc(np.eye(3)[y], y) == 1.0
    assert macro_ovr_auc(np.full((6, 3), 1 / 3), y) == 0.5


def test_macro_ovr_is_mean_of_binary():
    rng = np.random.default_rng(1)
    y = rng.permutation(np.arange(30) % 3)
    p = rng.dirichlet(np.ones(3), 30)
    assert macro_ovr_auc(p, y) == pytest.approx(np.mean([roc_auc(p[:, c], y == c) for c in range(3)]), abs=1e-15)


def test_macro_ovr_missing_class():
    with pytest.raises(ValueError, match=r"\[2\]"):
        macro_ovr_auc(np.full((4, 3), 1 / 3), [0, 1, 0, 1])


def test_accuracy():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 2, 2], [0, 1, 2, 1]) == 0.75
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_kappa_fixtures():
    assert cohen_kappa([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    # p_o = 0.5, p_e = 0.5
    assert cohen_kappa([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0
    assert cohen_kappa([2, 2, 2], [2, 2, 2]) == 0.0
    with pytest.raises(ValueError):
        cohen_kappa([0, 1], [0, 1, 1])


def test_kappa_hand_computed():
    preds = [0, 0, 0, 1, 1, 2]
    labels = [0, 0, 1, 1, 2, 2]
    p_o = 4 / 6
    p_e = (3 / 6) * (2 / 6) + (2 / 6) * (2 / 6) + (1 / 6) * (2 / 6)
    assert cohen_kappa(preds, labels) == pytest.approx((p_o - p_e) / (1 - p_e), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=2, max_size=30), st.lists(st.integers(0, 2), min_size=2, max_size=30))
def test_kappa_one_iff_perfect(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    k = cohen_kappa(a, b)
    assert -1 - 1e-12 <= k <= 1 + 1e-12
    perfect = a == b and len(set(a)) >= 2
    assert (abs(k - 1) < 1e-12) == perfect


def test_build_report_and_row():
    y = np.array([0, 1, 2, 0, 1, 2])
    probs = np.eye(3)[y] * 0.8 + 0.2 / 3
    r = build_report(probs[:, 1], probs, y, y, textures=["GGN", "solid"] * 3)
    assert (r.auc_h1, r.auc_h2, r.auc_h2_d, r.acc, r.kappa) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert r.csv_row() == "1.000000,1.000000,1.000000,1.000000,1.000000"
    assert set(r.by_texture) == {"GGN", "solid"}
    assert "AUC@H1 1.0000" in str(r)


def test_report_columns_order():
    assert REPORT_COLUMNS == ("auc_h1", "auc_h2", "auc_h2_d", "acc", "kappa")
    assert EvalReport(0.5, 0.25, 0.125, 1.0, 0.0).csv_row() == "0.500000,0.250000,0.125000,1.000000,0.000000"
