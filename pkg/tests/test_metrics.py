"""Metric correctness against independent oracles and hand-computed fixtures."""

import math

import numpy as np
import pytest

from pathnav.errors import MetricUndefinedError, TaskError
from pathnav.metrics import (
    BootstrapResult,
    ConfusionCounts,
    SurvivalRecord,
    accuracy,
    auroc_binary,
    auroc_ovr_macro,
    bootstrap_ci,
    checklist_accuracy,
    judge_score,
    km_estimate,
    logrank_test,
    macro_f1,
    paired_t_test,
    parse_judge_score,
)


# ----------------------------------------------------------------- oracles


def auroc_pair_counting(scores, labels):
    """O(n^2) oracle: P(score_pos > score_neg) + half credit for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def f1_brute_force(preds, labels, classes):
    """Recompute macro F1 with plain loops from raw confusion tallies."""
    total = 0.0
    for c in classes:
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        total += 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return total / len(classes)


def logrank_chi2_oracle(records):
    """Independent two-group log-rank aggregation with dict-based loops."""
    groups = sorted({r.group for r in records})
    assert len(groups) == 2
    event_times = sorted({r.time for r in records if r.event})
    o = e = v = 0.0
    for t in event_times:
        n_all = [r for r in records if r.time >= t]
        d_all = [r for r in records if r.event and r.time == t]
        N, D = len(n_all), len(d_all)
        n0 = sum(1 for r in n_all if r.group == groups[0])
        d0 = sum(1 for r in d_all if r.group == groups[0])
        o += d0
        e += D * n0 / N
        if N > 1:
            v += D * (N - D) / (N - 1) * (n0 / N) * (1 - n0 / N)
    return (o - e) ** 2 / v


def t_sf_via_incomplete_beta(t, df):
    """Two-sided t p-value via a continued-fraction incomplete beta."""

    def betacf(a, b, x):
        qab, qap, qam = a + b, a + 1.0, a - 1.0
        c, d = 1.0, 1.0 - qab * x / qap
        d = 1.0 / d if abs(d) > 1e-300 else 1e300
        h = d
        for m in range(1, 200):
            m2 = 2 * m
            aa = m * (b - m) * x / ((qam + m2) * (a + m2))
            d = 1.0 + aa * d
            d = 1.0 / d if abs(d) > 1e-300 else 1e300
            c = 1.0 + aa / c
            c = c if abs(c) > 1e-300 else 1e-300
            h *= d * c
            aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
            d = 1.0 + aa * d
            d = 1.0 / d if abs(d) > 1e-300 else 1e300
            c = 1.0 + aa / c
            c = c if abs(c) > 1e-300 else 1e-300
            delta = d * c
            h *= delta
            if abs(delta - 1.0) < 1e-12:
                break
        return h

    def betainc(a, b, x):
        if x <= 0:
            return 0.0
        if x >= 1:
            return 1.0
        ln_front = (
            math.lgamma(a + b)
            - math.lgamma(a)
            - math.lgamma(b)
            + a * math.log(x)
            + b * math.log(1.0 - x)
        )
        front = math.exp(ln_front)
        if x < (a + 1.0) / (a + b + 2.0):
            return front * betacf(a, b, x) / a
        return 1.0 - front * betacf(b, a, 1.0 - x) / b

    return betainc(df / 2.0, 0.5, df / (df + t * t))


class StubJudge:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def complete_bundle(self, bundle):
        reply = self.replies[self.calls]
        self.calls += 1
        return reply


# ---------------------------------------------------------------- accuracy


def test_accuracy_perfect():
    assert accuracy(["A", "B"], ["A", "B"]) == 1.0


def test_accuracy_hand_count():
    assert accuracy(list("ABBB"), list("AABB")) == 0.75


def test_accuracy_disjoint():
    assert accuracy(["A", "A"], ["B", "B"]) == 0.0


def test_accuracy_length_mismatch():
    with pytest.raises(MetricUndefinedError):
        accuracy(["A"], ["A", "B"])


def test_macro_f1_perfect():
    assert macro_f1(list("ABAB"), list("ABAB"), ("A", "B")) == 1.0


def test_macro_f1_hand_value():
    got = macro_f1(list("ABBB"), list("AABB"), ("A", "B"))
    assert got == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)


def test_macro_f1_absent_class_contributes_zero():
    got = macro_f1(list("AB"), list("AB"), ("A", "B", "C"))
    assert got == pytest.approx(2 / 3, abs=1e-12)


def test_macro_f1_matches_brute_force_fuzz():
    rng = np.random.default_rng(42)
    classes = ("A", "B", "C", "D")
    for _ in range(200):
        n = int(rng.integers(2, 60))
        labels = [classes[i] for i in rng.integers(0, 4, n)]
        preds = [classes[i] for i in rng.integers(0, 4, n)]
        assert macro_f1(preds, labels, classes) == pytest.approx(
            f1_brute_force(preds, labels, classes), abs=1e-12
        )
        brute_acc = sum(p == y for p, y in zip(preds, labels)) / n
        assert accuracy(preds, labels) == pytest.approx(brute_acc, abs=1e-12)


def test_confusion_counts_consistency():
    counts = ConfusionCounts.from_predictions(list("ABBB"), list("AABB"), ("A", "B"))
    assert counts.tp == {"A": 1, "B": 2}
    assert counts.fp["B"] == 1 and counts.fn["A"] == 1
    assert counts.n_total == 4


# ------------------------------------------------------------------- AUROC


def test_auroc_binary_example():
    assert auroc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auroc_all_ties():
    assert auroc_binary([0.5, 0.5, 0.5, 0.5], [0, 0, 1, 1]) == pytest.approx(0.5)


def test_auroc_perfect_separation():
    assert auroc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == pytest.approx(1.0)


def test_auroc_matches_pair_counting_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(4, 80))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        assert auroc_binary(scores, labels) == pytest.approx(
            auroc_pair_counting(scores, labels), abs=1e-9
        )


def test_auroc_ovr_macro_skips_empty_class():
    scores = np.array([[0.8, 0.2, 0.0], [0.3, 0.7, 0.0], [0.6, 0.4, 0.0], [0.1, 0.9, 0.0]])
    labels = np.array(["A", "B", "A", "B"])
    with pytest.warns(UserWarning, match="skipped"):
        got = auroc_ovr_macro(scores, labels, ("A", "B", "C"))
    a = auroc_pair_counting(scores[:, 0], labels == "A")
    b = auroc_pair_counting(scores[:, 1], labels == "B")
    assert got == pytest.approx((a + b) / 2)


def test_auroc_ovr_macro_all_skipped_undefined():
    scores = np.array([[1.0, 0.0], [0.5, 0.5]])
    labels = np.array(["A", "A"])
    with pytest.warns(UserWarning):
        with pytest.raises(MetricUndefinedError):
            auroc_ovr_macro(scores, labels, ("A", "B"))


# ------------------------------------------------------------- judge score


def test_judge_score_plain_number():
    assert judge_score("gen", "ref", StubJudge(["7"])) == 7.0


def test_judge_score_out_of_range():
    with pytest.raises(TaskError):
        judge_score("gen", "ref", StubJudge(["11", "11"]))


def test_judge_score_lenient_scan():
    assert parse_judge_score("Score: 8.5") == 8.5


def test_judge_score_retry_recovers():
    judge = StubJudge(["no score here", "6"])
    assert judge_score("gen", "ref", judge) == 6.0
    assert judge.calls == 2


# -------------------------------------------------------------- checklists


def test_checklist_two_stage_fixture():
    # Case A: 2 items, 1 match. Case B: 10 items, all match.
    preds = [["Yes", "No"], ["x"] * 10]
    refs = [["Yes", "Yes"], ["x"] * 10]
    got = checklist_accuracy(preds, refs)
    assert got == pytest.approx(0.75, abs=1e-12)
    pooled = 11 / 12  # what pooled item accuracy would say instead
    assert got != pytest.approx(pooled, abs=1e-6)


def test_checklist_all_match():
    assert checklist_accuracy([["a", "b"]], [["a", "b"]]) == 1.0


def test_checklist_no_match():
    assert checklist_accuracy([["a"]], [["b"]]) == 0.0


def test_checklist_length_mismatch():
    with pytest.raises(MetricUndefinedError):
        checklist_accuracy([["a", "b"]], [["a"]])


# ---------------------------------------------------------------- survival


def test_km_all_events():
    curve = km_estimate([SurvivalRecord(t, True) for t in (1, 2, 3)])
    np.testing.assert_allclose(curve.survival, [2 / 3, 1 / 3, 0.0], atol=1e-12)


def test_km_with_censoring():
    records = [
        SurvivalRecord(1, True),
        SurvivalRecord(2, False),
        SurvivalRecord(3, True),
    ]
    curve = km_estimate(records)
    np.testing.assert_allclose(curve.times, [1, 3])
    np.testing.assert_allclose(curve.survival, [2 / 3, 0.0], atol=1e-12)


def test_km_single_censored_record():
    curve = km_estimate([SurvivalRecord(5, False)])
    assert curve.times.size == 0


def test_km_monotone_property():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        records = [
            SurvivalRecord(float(rng.exponential(20)), bool(rng.random() < 0.7))
            for _ in range(n)
        ]
        curve = km_estimate(records)
        curve.validate()


def test_logrank_identical_groups():
    base = [SurvivalRecord(t, True, 0) for t in (1, 3, 5, 7)]
    dup = [SurvivalRecord(r.time, r.event, 1) for r in base]
    res = logrank_test(base + dup)
    assert res.chi_squared == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)


def test_logrank_separated_groups_fixture():
    records = [SurvivalRecord(t, True, 0) for t in (1, 2, 3)] + [
        SurvivalRecord(t, True, 1) for t in (10, 11, 12)
    ]
    res = logrank_test(records)
    assert res.df == 1
    assert res.chi_squared == pytest.approx(logrank_chi2_oracle(records), rel=1e-12)
    assert res.p_value < 0.05


def test_logrank_expected_group_empty():
    records = [SurvivalRecord(1, True, 0), SurvivalRecord(2, True, 1)]
    with pytest.raises(MetricUndefinedError, match="no records"):
        logrank_test(records, expected_groups=[0, 1, 2])


def test_logrank_single_group_errors():
    with pytest.raises(MetricUndefinedError):
        logrank_test([SurvivalRecord(1, True, 0), SurvivalRecord(2, True, 0)])


def test_logrank_three_groups_df():
    rng = np.random.default_rng(9)
    records = [
        SurvivalRecord(float(rng.exponential(20 + 10 * g)), True, g)
        for g in range(3)
        for _ in range(15)
    ]
    res = logrank_test(records)
    assert res.df == 2
    assert 0.0 <= res.p_value <= 1.0


# ---------------------------------------------------------------- bootstrap


def test_bootstrap_constant_values():
    res = bootstrap_ci([4.0] * 10, B=200, rng=np.random.default_rng(0))
    assert res.lower == res.upper == res.estimate == 4.0


def test_bootstrap_deterministic_per_seed():
    vals = np.random.default_rng(5).normal(size=40)
    a = bootstrap_ci(vals, B=500, rng=np.random.default_rng(7))
    b = bootstrap_ci(vals, B=500, rng=np.random.default_rng(7))
    assert (a.lower, a.upper) == (b.lower, b.upper)


def test_bootstrap_brackets_estimate():
    rng = np.random.default_rng(11)
    for _ in range(50):
        vals = rng.normal(size=int(rng.integers(5, 60)))
        res = bootstrap_ci(vals, B=400, rng=rng)
        assert res.lower <= res.estimate <= res.upper


def test_bootstrap_custom_stat():
    vals = np.arange(20.0)
    res = bootstrap_ci(vals, B=200, rng=np.random.default_rng(1), stat=np.median)
    assert res.lower <= res.estimate <= res.upper


# ------------------------------------------------------------ paired tests


def test_paired_t_degenerate():
    res = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert res.degenerate and res.p_value == 1.0


def test_paired_t_consistent_sign():
    rng = np.random.default_rng(2)
    b = rng.normal(size=12)
    a = b + 1.0 + rng.normal(scale=1e-3, size=12)
    res = paired_t_test(a, b)
    assert res.p_value < 1e-6


def test_paired_t_matches_incomplete_beta_oracle():
    a = np.array([3.1, 2.7, 4.0, 3.3, 2.9, 3.8, 3.5, 2.6, 3.9, 3.2])
    b = np.array([2.8, 2.9, 3.1, 3.0, 2.5, 3.6, 3.1, 2.8, 3.3, 3.0])
    res = paired_t_test(a, b)
    oracle_p = t_sf_via_incomplete_beta(res.t_statistic, res.df)
    assert res.p_value == pytest.approx(oracle_p, abs=1e-6)


def test_paired_t_length_guard():
    with pytest.raises(MetricUndefinedError):
        paired_t_test([1.0], [2.0])
