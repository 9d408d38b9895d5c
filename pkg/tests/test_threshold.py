from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunemia.attacks import AttackDataset, fit_threshold_attack, learn_thresholds, mentr, threshold_attack, xent
from prunemia.attacks.threshold import GE, LE, apply_thresholds, best_threshold, metric_values
from prunemia.rng import substream


def literal_mentr(p, y):
    p = [min(max(v, 1e-12), 1 - 1e-12) for v in p]
    total = -(1 - p[y]) * np.log(p[y])
    for t, v in enumerate(p):
        if t != y:
            total -= v * np.log(1 - v)
    return total


def literal_xent(p, y):
    return -np.log(min(max(p[y], 1e-12), 1 - 1e-12))


def brute_force(values, is_member):
    """Every midpoint plus +/-inf, both directions, exact rational accuracy; first best wins."""
    distinct = sorted(set(values.tolist()))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [np.inf]
    m, n = int(is_member.sum()), int((~is_member).sum())
    best = None
    for direction in (GE, LE):
        for t in cands:
            pred = values >= t if direction == GE else values <= t
            tp = int(np.sum(pred & is_member))
            tn = int(np.sum(~pred & ~is_member))
            acc = (Fraction(tp, m) + Fraction(tn, n)) / 2
            key = (-acc, t, direction != GE)
            if best is None or key < best[0]:
                best = (key, t, direction, acc)
    return best[1], best[2], best[3]


class TestMetrics:
    def test_one_hot_is_zero(self):
        assert mentr([1.0, 0.0, 0.0], 0) <= 1e-11
        assert xent([1.0, 0.0, 0.0], 0) <= 1e-11

    def test_uniform_mentr(self):
        assert mentr([0.5, 0.5], 0) == pytest.approx(0.6931, abs=1e-4)

    def test_xent_value(self):
        assert xent([0.9, 0.1], 0) == pytest.approx(0.10536, abs=1e-5)

    @pytest.mark.parametrize("fn", [xent, mentr])
    def test_label_range(self, fn):
        with pytest.raises(ValueError):
            fn([0.5, 0.5], 2)

    def test_literal_oracles(self):
        rng = substream(0, "oracle")
        post = rng.dirichlet(np.full(6, 0.3), size=1000)
        labels = rng.integers(0, 6, 1000)
        data = AttackDataset(post, labels, np.zeros(1000, dtype=bool))
        mv, xv = metric_values("Mentr", data), metric_values("Xent", data)
        for i in range(1000):
            assert abs(mv[i] - literal_mentr(post[i], labels[i])) <= 1e-12
            assert abs(xv[i] - literal_xent(post[i], labels[i])) <= 1e-12
            assert mentr(post[i], labels[i]) == pytest.approx(mv[i], abs=1e-12)


class TestLearnThresholds:
    def test_separable(self):
        table = learn_thresholds(np.array([0.9, 0.8, 0.2, 0.1]), np.zeros(4), np.array([1, 1, 0, 0]), 1)
        entry = table.entry(0)
        assert (entry.threshold, entry.direction, entry.balanced_accuracy) == (0.5, GE, 1.0)

    def test_constant_values(self):
        entry = best_threshold(np.full(6, 0.3), np.array([1, 0] * 3, dtype=bool))
        assert entry.balanced_accuracy == 0.5 and entry.threshold == 0.3

    def test_reversed_direction(self):
        entry = best_threshold(np.array([0.1, 0.2, 0.8, 0.9]), np.array([1, 1, 0, 0], dtype=bool))
        assert entry.direction == LE and entry.balanced_accuracy == 1.0

    def test_missing_class_uses_global(self):
        table = learn_thresholds(np.array([0.9, 0.1, 0.8, 0.2]), np.zeros(4), np.array([1, 0, 1, 0]), 3)
        assert table.entry(2) == table.global_entry

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_brute_force(self, seed):
        rng = substream(seed, "bf")
        values = np.round(rng.normal(size=40), 1)
        is_member = rng.random(40) < 0.5
        is_member[:2] = [True, False]
        threshold, direction, acc = brute_force(values, is_member)
        entry = best_threshold(values, is_member)
        assert entry.balanced_accuracy == float(acc)
        assert (entry.threshold, entry.direction) == (threshold, direction)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_transform_invariance(self, seed):
        rng = substream(seed, "mono")
        values = np.round(rng.normal(size=60), 2)
        labels = rng.integers(0, 3, 60)
        member = rng.random(60) < 0.5
        # targets reuse shadow (value, label) pairs; midpoints do not commute with the transform
        pick = rng.integers(0, 60, 30)
        target_values, target_labels = values[pick], labels[pick]

        def transform(v):
            return v**3 + v

        plain = learn_thresholds(values, labels, member, 3)
        moved = learn_thresholds(transform(values), labels, member, 3)
        a, _ = apply_thresholds(plain, target_values, target_labels)
        b, _ = apply_thresholds(moved, transform(target_values), target_labels)
        np.testing.assert_array_equal(a, b)


class TestThresholdAttack:
    def _data(self, k=3, n=200, seed=0, signal=True):
        rng = substream(seed, "ta")
        member = np.arange(n) < n // 2
        labels = rng.integers(0, k, n)
        conf = np.where(member, 0.95, 0.6) if signal else np.full(n, 0.8)
        post = np.full((n, k), 0.0)
        post[np.arange(n), labels] = conf
        post += ((1 - conf) / (k - 1))[:, None] * (np.arange(k)[None, :] != labels[:, None])
        return AttackDataset(post, labels, member)

    @pytest.mark.parametrize("kind", ["Conf", "Xent", "Mentr", "Top1Conf"])
    def test_separable_perfect(self, kind):
        data = self._data()
        result = threshold_attack(kind, fit_threshold_attack(kind, data), data)
        assert result.accuracy == 1.0

    def test_null_distribution(self):
        rng = substream(1, "null")
        n = 2000
        post = rng.dirichlet(np.ones(4), size=n)
        member = np.arange(n) % 2 == 0
        labels = rng.integers(0, 4, n)
        shadow = AttackDataset(post[:1000], labels[:1000], member[:1000])
        target = AttackDataset(post[1000:], labels[1000:], member[1000:])
        result = threshold_attack("Conf", fit_threshold_attack("Conf", shadow), target)
        assert abs(result.accuracy - 0.5) <= 0.03

    def test_k_mismatch(self):
        table = fit_threshold_attack("Conf", self._data(k=3))
        with pytest.raises(ValueError, match="classes"):
            threshold_attack("Conf", table, self._data(k=4))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            fit_threshold_attack("Loss", self._data())
