import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minnsa.metrics import auc, roc_curve, trapezoid_area, wilcoxon_signed_rank


def pair_count_auc(scores, labels):
    """Brute-force oracle: correctly ordered (pos, neg) pairs, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def enumerate_signed_rank_p(d):
    """Exhaustive sign-flip oracle for the two-sided p-value of T+."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    mags = np.abs(d)
    # midranks by direct counting
    ranks = np.array([(mags < m).sum() + ((mags == m).sum() + 1) / 2 for m in mags])
    observed = ranks[d > 0].sum()
    le = ge = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        t = ranks[np.array(signs, dtype=bool)].sum()
        le += t <= observed
        ge += t >= observed
    total = 2 ** len(d)
    return min(total, 2 * min(le, ge)) / total


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0

    def test_three_of_four(self):
        assert auc([0.9, 0.3, 0.8, 0.2], [1, 1, 0, 0]) == 0.75

    def test_all_ties(self):
        assert auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])

    @settings(max_examples=200, deadline=None)
    @given(data=st.data())
    def test_matches_pair_counting(self, data):
        n = data.draw(st.integers(2, 30))
        labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        labels[0], labels[1] = 0, 1
        scores = data.draw(st.lists(st.integers(-5, 5).map(float), min_size=n, max_size=n))
        assert auc(scores, labels) == pair_count_auc(scores, labels)

    def test_complement_and_monotone_transform(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.normal(size=40)
            y = np.r_[0, 1, rng.integers(0, 2, 38)]
            assert auc(s, y) + auc(-s, y) == pytest.approx(1.0, abs=1e-15)
            assert auc(np.exp(3 * s) + 1, y) == auc(s, y)


class TestRoc:
    def test_perfect_passes_corner(self):
        fpr, tpr = roc_curve([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0])
        assert (0.0, 1.0) in set(zip(fpr.tolist(), tpr.tolist()))
        assert trapezoid_area(fpr, tpr) == 1.0

    def test_reversed(self):
        fpr, tpr = roc_curve([0.2, 0.3, 0.8, 0.9], [1, 1, 0, 0])
        assert trapezoid_area(fpr, tpr) == 0.0

    def test_staircase_shape(self):
        rng = np.random.default_rng(1)
        s = rng.integers(0, 5, 50).astype(float)
        y = np.r_[0, 1, rng.integers(0, 2, 48)]
        fpr, tpr = roc_curve(s, y)
        assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()
        assert len(fpr) == len(np.unique(s)) + 1

    def test_area_equals_auc(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = rng.integers(2, 50)
            s = np.round(rng.normal(size=n), rng.integers(0, 3))
            y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
            assert abs(trapezoid_area(*roc_curve(s, y)) - auc(s, y)) < 1e-12


class TestWilcoxon:
    def test_all_positive(self):
        b = np.arange(10.0)
        res = wilcoxon_signed_rank(b + 1 + np.linspace(0, 0.5, 10), b)
        assert res.pvalue == 2 / 1024
        assert res.statistic == 55 and res.method == "exact"

    def test_symmetric_differences(self):
        d = np.array([0.5, -0.5, 1.2, -1.2, 3.0, -3.0])
        res = wilcoxon_signed_rank(d, np.zeros(6))
        assert res.statistic == 6 * 7 / 4
        assert res.pvalue == 1.0

    def test_zero_differences_dropped(self):
        res = wilcoxon_signed_rank([1, 2, 3, 4], [1, 1, 1, 1])
        assert res.n == 3

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])

    def test_unequal_lengths(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0])

    def test_n8_enumeration(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert wilcoxon_signed_rank(a, b).pvalue == enumerate_signed_rank_p(a - b)

    def test_ties_enumeration(self):
        d = np.array([1.0, -1.0, 2.0, 2.0, -3.0, 1.0, 4.0])
        assert wilcoxon_signed_rank(d).pvalue == enumerate_signed_rank_p(d)

    def test_against_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(4)
        for n in (10, 20, 40):
            a, b = rng.normal(size=n), rng.normal(0.3, 1, size=n)
            mine = wilcoxon_signed_rank(a, b)
            method = "exact" if n <= 25 else "approx"
            ref = scipy_stats.wilcoxon(a, b, method=method, correction=False)
            assert mine.pvalue == pytest.approx(ref.pvalue, rel=1e-9)

    def test_normal_approximation_large_n(self):
        rng = np.random.default_rng(5)
        res = wilcoxon_signed_rank(rng.normal(size=60))
        assert res.method == "normal" and 0 <= res.pvalue <= 1
