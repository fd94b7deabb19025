from fractions import Fraction
from itertools import product

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from lagcausal.graph import LaggedGraph
from lagcausal.stats import (CorrTensor, DegenerateStatisticError, EvalReport, auc, bonferroni, cell_mask,
                             format_table, lagged_crosscorr, normalize_cc, signed_rank_counts,
                             wilcoxon_signed_rank)


def brute_auc(scores, truth) -> Fraction:
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_wilcoxon_p(d) -> float:
    """Two-sided p from the 2^n sign flips of the observed |d| ranks."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    r = scipy.stats.rankdata(np.abs(d))
    obs = r[d > 0].sum()
    sums = np.array([sum(rk for rk, s in zip(r, signs) if s) for signs in product((0, 1), repeat=len(d))])
    le, ge = np.sum(sums <= obs + 1e-9), np.sum(sums >= obs - 1e-9)
    return min(1.0, 2 * min(le, ge) / 2 ** len(d))


# lagged cross-correlation

def test_crosscorr_copy_and_anticopy():
    r = np.random.default_rng(0)
    x1 = r.normal(size=301)
    x = np.column_stack([x1[1:], x1[:-1], -x1[:-1]])  # X2_t = X1_{t-1}, X3_t = -X1_{t-1}
    cc = lagged_crosscorr(x, 3).values
    assert cc[1, 0, 2] == pytest.approx(1.0, abs=1e-12)
    assert cc[2, 0, 2] == pytest.approx(-1.0, abs=1e-12)


def test_crosscorr_independent_columns_small():
    r = np.random.default_rng(1)
    vals = np.concatenate([lagged_crosscorr(r.normal(size=(500, 4)), 3).values.ravel() for _ in range(50)])
    assert np.mean(np.abs(vals) < 0.2) >= 0.99


def test_crosscorr_padding_and_guards():
    x = np.random.default_rng(2).normal(size=(50, 2))
    x[:, 1] = 3.0
    cc = lagged_crosscorr(x, 2, v_max=4)
    assert cc.values.shape == (4, 4, 2)
    assert not cc.values[:, 1].any() and not cc.values[1].any() and not cc.values[2:].any()
    with pytest.raises(ValueError):
        lagged_crosscorr(x[:4], 2)
    with pytest.raises(ValueError):
        lagged_crosscorr(x, 2, v_max=1)


def test_crosscorr_matches_pearson():
    x = np.random.default_rng(3).normal(size=(80, 3))
    cc = lagged_crosscorr(x, 3).values
    for i, j, tau in product(range(3), range(3), range(1, 4)):
        expected = np.corrcoef(x[:-tau, i], x[tau:, j])[0, 1]
        assert cc[j, i, 3 - tau] == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_crosscorr_affine_invariance(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(60, 3))
    y = x * r.uniform(0.01, 100, size=3) + r.normal(0, 50, size=3)
    assert np.max(np.abs(lagged_crosscorr(x, 3).values - lagged_crosscorr(y, 3).values)) < 1e-10


def test_normalize_examples():
    z = normalize_cc(CorrTensor(np.zeros((2, 2, 1))))
    assert z.normalized and not z.values.any()
    one = np.zeros((2, 2, 1))
    one[0, 1, 0] = -0.8
    assert normalize_cc(CorrTensor(one)).values[0, 1, 0] == 1.0
    two = np.array([0.4, -0.8]).reshape(1, 2, 1)
    assert np.allclose(normalize_cc(CorrTensor(two)).values.ravel(), [0.5, 1.0])
    assert np.allclose(normalize_cc(CorrTensor(two), "abs").values.ravel(), [0.4, 0.8])
    assert np.allclose(normalize_cc(CorrTensor(two), "rank").values.ravel(), [0.0, 1.0])
    with pytest.raises(ValueError):
        normalize_cc(CorrTensor(two), "bogus")


# AUC

def test_auc_examples():
    truth = np.array([1, 0, 1, 0]).reshape(1, 4, 1)
    assert auc(truth.astype(float), truth) == 1.0
    assert auc(np.full((1, 4, 1), 0.3), truth) == 0.5
    assert auc(np.array([0.9, 0.8, 0.3, 0.1]).reshape(1, 4, 1), truth) == 0.75


def test_auc_degenerate():
    with pytest.raises(DegenerateStatisticError):
        auc(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)))
    with pytest.raises(DegenerateStatisticError):
        auc(np.zeros((2, 2, 1)), np.ones((2, 2, 1)))


def test_auc_mask_excludes_padding():
    g = LaggedGraph(2, 1, ((0, 1, 1),))
    s = np.zeros((3, 3, 1))
    s[1, 0, 0] = 0.5
    s[2, 2, 0] = 0.9  # padded cell outranking the true edge
    assert auc(s, g, np.array([True, True, False])) == 1.0
    assert auc(s, g) < 1.0
    assert auc(s, g, cell_mask([True, True, False], 1)) == 1.0


@given(st.integers(2, 60), st.integers(0, 2**32 - 1), st.booleans())
@settings(max_examples=200, deadline=None)
def test_auc_matches_brute_force(n, seed, ties):
    r = np.random.default_rng(seed)
    truth = r.random(n) < 0.4
    truth[0], truth[1] = True, False
    scores = r.integers(0, 4, size=n).astype(float) if ties else r.random(n)
    expected = brute_auc(scores.tolist(), truth.tolist())
    got = auc(scores.reshape(1, n, 1), truth.reshape(1, n, 1))
    assert abs(got - float(expected)) <= 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_auc_monotone_invariance_and_complement(seed):
    r = np.random.default_rng(seed)
    s = r.normal(size=(3, 3, 2))
    t = (r.random((3, 3, 2)) < 0.4).astype(int)
    t.flat[0], t.flat[1] = 1, 0
    base = auc(s, t)
    assert abs(auc(s ** 3, t) - base) < 1e-12
    assert abs(auc(2 * s + 1, t) - base) < 1e-12
    assert abs(auc(-s, t) + base - 1.0) < 1e-12


# Wilcoxon

def test_wilcoxon_examples():
    with pytest.raises(DegenerateStatisticError):
        wilcoxon_signed_rank([0.5] * 10, [0.5] * 10)
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6)
    assert res.p_value == 2 / 64 and res.method == "exact" and res.statistic == 0 and res.n_effective == 6
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1])


def test_wilcoxon_drops_zero_differences():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6, 7, 8], [1, 2, 0, 0, 0, 0, 0, 0])
    assert res.n_effective == 6 and res.p_value == 2 / 64


def test_signed_rank_counts_small():
    # ranks 1, 2, 3 doubled: subsets sums {0, 2, 4, 6, 6, 8, 10, 12}
    c = signed_rank_counts([2, 4, 6])
    assert c.sum() == 8 and c[6] == 2 and c[0] == 1 and c[12] == 1


@pytest.mark.parametrize("n", range(5, 13))
def test_wilcoxon_exact_matches_enumeration(n):
    r = np.random.default_rng(n)
    for trial in range(5):
        d = r.normal(size=n)
        if trial % 2:
            d = np.round(d, 1)  # force tied |d|
            d[d == 0] = 0.1
        res = wilcoxon_signed_rank(d, np.zeros(n))
        assert res.p_value == pytest.approx(brute_wilcoxon_p(d), abs=1e-15)


def test_wilcoxon_matches_scipy():
    r = np.random.default_rng(7)
    for n in (8, 15, 20):
        a, b = r.normal(size=n), r.normal(0.3, 1, size=n)
        ref = scipy.stats.wilcoxon(a, b, method="exact")
        assert wilcoxon_signed_rank(a, b).p_value == pytest.approx(ref.pvalue, rel=1e-9)
    a, b = r.normal(size=40), r.normal(0.3, 1, size=40)
    ref = scipy.stats.wilcoxon(a, b, method="approx", correction=True)
    res = wilcoxon_signed_rank(a, b)
    assert res.method == "normal" and res.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    assert res.statistic == pytest.approx(ref.statistic)


def test_wilcoxon_exact_vs_normal_at_20():
    r = np.random.default_rng(11)
    for _ in range(50):
        a, b = r.normal(size=20), r.normal(0.2, 1, size=20)
        exact = wilcoxon_signed_rank(a, b)
        approx = wilcoxon_signed_rank(a, b, exact_max_n=0)
        assert exact.method == "exact" and approx.method == "normal"
        assert abs(exact.p_value - approx.p_value) <= 0.01


def test_bonferroni_examples():
    assert bonferroni([0.01, 0.04], 0.05) == [True, False]
    assert bonferroni([0.049], 0.05) == [True]
    assert bonferroni([0.5] * 10) == [False] * 10
    with pytest.raises(ValueError):
        bonferroni([])


# reports

def test_eval_report_roundtrip(tmp_path):
    r = EvalReport("var", [("a", 0.9), ("b", 0.7), ("c", 0.8)])
    assert r.mean == pytest.approx(0.8) and r.sd == pytest.approx(0.1) and r.n == 3
    r.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.per_dataset_auc == r.per_dataset_auc and back.method == "var"
    assert "0.800 ± 0.100" in format_table([r])
    empty = EvalReport("none")
    assert empty.n == 0 and empty.sd == 0 and empty.to_json()["mean"] is None
    assert "--" in format_table([empty])
