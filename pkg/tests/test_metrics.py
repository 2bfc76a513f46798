import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchdistill.errors import ContractError
from patchdistill.metrics import (
    auc,
    evaluate,
    pr_curve,
    precision_at_recall,
    precision_recall,
    robustness_sweep,
    write_pr_table,
    write_records,
)


def pairwise_auc(scores, labels):
    """O(Np * Nn) oracle: P(pos > neg) + 0.5 P(pos == neg)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def sweep_p_at_r(scores, labels, target):
    """Try every candidate threshold from high to low; first with recall >= target wins."""
    n_pos = sum(labels)
    for thr in sorted(set(scores) | {min(scores) - 1}, reverse=True):
        cut = np.nextafter(thr, -np.inf)
        tp = sum(1 for s, y in zip(scores, labels) if s > cut and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s > cut and y == 0)
        if tp / n_pos >= target:
            return tp / (tp + fp)
    raise AssertionError("unreachable")


class TestPrecisionRecall:
    def test_perfect(self):
        p = precision_recall([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.5)
        assert (p.precision, p.recall) == (1.0, 1.0)

    def test_threshold_above_everything(self):
        p = precision_recall([0.9, 0.8, 0.2], [1, 0, 0], 0.95)
        assert p.recall == 0.0 and not p.precision_defined and p.precision == 1.0

    def test_hand_count(self):
        p = precision_recall([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0], 0.5)
        assert (p.tp, p.fp, p.fn, p.tn) == (1, 1, 1, 1)
        assert (p.precision, p.recall) == (0.5, 0.5)

    def test_empty(self):
        with pytest.raises(ContractError):
            precision_recall([], [], 0.5)


class TestAUC:
    def test_separated(self):
        assert auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_equal(self):
        assert auc([0.4] * 7, [1, 0, 1, 0, 0, 1, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(ContractError):
            auc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        levels = int(rng.integers(2, 12)) if seed % 2 else 10**6
        scores = rng.integers(0, levels, n) / levels
        assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.integers(0, 1)), min_size=2, max_size=40))
    def test_invariant_under_monotone_transform(self, pairs):
        scores = np.array([p[0] for p in pairs])
        labels = np.array([p[1] for p in pairs])
        if labels.min() == labels.max():
            return
        a = auc(scores, labels)
        assert abs(a - auc(np.exp(3 * scores) + 7, labels)) <= 1e-12
        assert 0.0 <= a <= 1.0


class TestPrecisionAtRecall:
    def test_perfect_separation(self):
        for target in (0.5, 0.9, 1.0):
            assert precision_at_recall([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], target)[0] == 1.0

    def test_hand_sweep(self):
        p, thr = precision_at_recall([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1], 0.9)
        assert p == 3 / 4
        assert thr < 0.6 and thr > 0.59

    def test_full_recall_threshold_just_below_lowest_positive(self):
        scores = [0.95, 0.7, 0.66, 0.4, 0.35, 0.1]
        labels = [1, 0, 1, 0, 1, 0]
        p, thr = precision_at_recall(scores, labels, 1.0)
        assert thr == np.nextafter(0.35, -np.inf)
        assert p == 3 / (3 + 2)

    @pytest.mark.parametrize("seed", range(25))
    @pytest.mark.parametrize("target", [0.5, 0.9, 0.95, 1.0])
    def test_matches_sweep_oracle(self, seed, target):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[0] = 1
        scores = (rng.integers(0, 15, n) / 15).tolist()
        assert precision_at_recall(scores, labels, target)[0] == pytest.approx(sweep_p_at_r(scores, labels.tolist(), target), abs=1e-12)

    def test_no_positives(self):
        with pytest.raises(ContractError):
            precision_at_recall([0.1, 0.2], [0, 0], 0.9)

    @pytest.mark.parametrize("target", [0.0, 1.1])
    def test_bad_target(self, target):
        with pytest.raises(ContractError):
            precision_at_recall([0.1, 0.2], [0, 1], target)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
    def test_higher_target_never_beats_best_at_lower(self, pairs):
        scores = [p[0] for p in pairs]
        labels = [p[1] for p in pairs]
        if sum(labels) == 0:
            return
        curve = pr_curve(scores, labels)
        lo, hi = 0.5, 0.9
        best_lo = max(p for r, p, _ in curve if r >= lo)
        assert precision_at_recall(scores, labels, hi)[0] <= best_lo + 1e-12


class TestCurveAndReport:
    def test_curve_recall_non_increasing_in_threshold(self):
        rng = np.random.default_rng(3)
        scores, labels = rng.random(80), rng.integers(0, 2, 80)
        curve = pr_curve(scores, labels)
        by_thr = sorted(curve, key=lambda c: c[2])
        recalls = [c[0] for c in by_thr]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))
        assert curve[-1][0] == 1.0

    def test_curve_points_match_precision_recall(self):
        rng = np.random.default_rng(4)
        scores, labels = rng.integers(0, 9, 50) / 9, rng.integers(0, 2, 50)
        for r, p, thr in pr_curve(scores, labels):
            pt = precision_recall(scores, labels, thr)
            assert (pt.recall, pt.precision) == pytest.approx((r, p))

    def test_evaluate_and_writers(self, tmp_path):
        rep = evaluate([0.9, 0.7, 0.4, 0.2, 0.6], [1, 1, 0, 0, 1])
        assert rep.auc == 1.0 and set(rep.p_at_r) == {0.9, 0.95}
        assert "AUC: 1.0000" in rep.to_text()
        write_records(tmp_path / "m.tsv", rep.records())
        write_pr_table(tmp_path / "pr.tsv", rep.pr_curve)
        assert (tmp_path / "m.tsv").read_text().startswith("metric\tvalue\tparams")
        assert (tmp_path / "pr.tsv").read_text().startswith("recall\tprecision\tthreshold")


class TestRobustnessSweep:
    def _fixture(self):
        rng = np.random.default_rng(0)
        imgs = [np.full((16, 16), 100 + 40 * (i % 2), np.uint8) for i in range(10)]
        imgs = [np.clip(im + rng.integers(-5, 5, im.shape), 0, 255).astype(np.uint8) for im in imgs]
        return imgs, [i % 2 for i in range(10)], lambda im: float(im.mean())

    def test_zero_ratio_equals_clean(self):
        imgs, labels, fn = self._fixture()
        clean = auc([fn(im) for im in imgs], labels)
        sweep = robustness_sweep(fn, imgs, labels, (0.0, 0.1, 0.2, 0.3))
        assert sweep[0.0] == clean
        assert list(sweep) == [0.0, 0.1, 0.2, 0.3]

    def test_reproducible(self):
        imgs, labels, fn = self._fixture()
        assert robustness_sweep(fn, imgs, labels, seed=4) == robustness_sweep(fn, imgs, labels, seed=4)
