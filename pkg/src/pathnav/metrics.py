"""Evaluation mathematics.

Classification metrics (accuracy, macro F1, one-vs-rest macro AUROC with
midrank tie handling), judge-score parsing, two-stage checklist accuracy,
Kaplan-Meier product-limit estimation, the log-rank chi-squared test with the
hypergeometric variance-covariance matrix, case-level percentile bootstrap
intervals, and paired t tests.

Everything here is a pure function. Survival inputs are SurvivalRecord
triples (time in months, event indicator, predicted group).
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from pathnav.errors import MetricUndefinedError, TaskError
from pathnav.prompts import PromptBundle

# --------------------------------------------------------------- counts


@dataclass
class ConfusionCounts:
    """One-vs-rest true-positive/false-positive/false-negative tallies."""

    classes: tuple
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    n_total: int = 0

    @classmethod
    def from_predictions(cls, preds, labels, classes) -> "ConfusionCounts":
        counts = cls(classes=tuple(classes))
        for c in classes:
            counts.tp[c] = counts.fp[c] = counts.fn[c] = 0
        for p, y in zip(preds, labels):
            if p == y:
                counts.tp[y] += 1
            else:
                counts.fp[p] = counts.fp.get(p, 0) + 1
                counts.fn[y] = counts.fn.get(y, 0) + 1
        counts.n_total = len(labels)
        return counts


def accuracy(preds, labels) -> float:
    """Mean exact-match indicator."""
    if len(preds) != len(labels) or not labels:
        raise MetricUndefinedError("need equal, non-zero prediction/label lengths")
    return float(np.mean([p == y for p, y in zip(preds, labels)]))


def macro_f1(preds, labels, classes) -> float:
    """Unweighted mean over `classes` of per-class F1 (one-vs-rest).

    A class with precision + recall == 0 (including classes absent from both
    predictions and labels) contributes 0 to the mean.
    """
    if len(preds) != len(labels) or not labels:
        raise MetricUndefinedError("need equal, non-zero prediction/label lengths")
    counts = ConfusionCounts.from_predictions(preds, labels, classes)
    f1s = []
    for c in classes:
        tp = counts.tp.get(c, 0)
        fp = counts.fp.get(c, 0)
        fn = counts.fn.get(c, 0)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return float(np.mean(f1s))


# ----------------------------------------------------------------- AUROC


def _auroc_from_scores(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-statistic AUROC with midrank (half credit) tie handling."""
    ranks = sps.rankdata(scores)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs a positive and a negative")
    rank_sum = float(ranks[positives].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def auroc_binary(scores, labels) -> float:
    """AUROC of positive-class scores against binary labels."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(labels).astype(bool)
    return _auroc_from_scores(scores, positives)


def auroc_ovr_macro(scores, labels, classes) -> float:
    """Macro mean of per-class one-vs-rest AUROCs.

    `scores` is (n_cases, n_classes) aligned with `classes`. Classes with no
    positives or no negatives are skipped with a warning; if every class is
    skipped the metric is undefined.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] != len(classes):
        raise MetricUndefinedError("scores must be (n_cases, n_classes)")
    per_class = []
    for j, c in enumerate(classes):
        positives = labels == c
        if positives.all() or not positives.any():
            warnings.warn(
                f"class {c!r} has no positives or no negatives; skipped in AUROC",
                stacklevel=2,
            )
            continue
        per_class.append(_auroc_from_scores(scores[:, j], positives))
    if not per_class:
        raise MetricUndefinedError("AUROC undefined: every class was skipped")
    return float(np.mean(per_class))


# ------------------------------------------------------------ judge score

JUDGE_SYSTEM = (
    "You are an expert in scientific pathology report evaluation. Your task "
    "is to compare two pathology reports and assign a similarity score on a "
    "scale from 0 to 10. A score of 10 indicates that the reports describe "
    "nearly identical medical findings, whereas a score of 0 means they "
    "discuss completely different content. Ignore irrelevant details such as "
    "patient name, sample ID, date, physician name, and other administrative "
    "information. Although the reports may differ in formatting, focus only "
    "on comparing their medical content, including diagnoses, observations, "
    "and clinical details. Provide only a single numerical score from 0 to "
    "10, without explanation."
)

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def parse_judge_score(response: str) -> float:
    """First number in the reply, required to lie in [0, 10]."""
    m = _NUMBER_RE.search(response)
    if not m:
        raise TaskError(f"judge reply has no numeric score: {response!r}")
    score = float(m.group(0))
    if not 0.0 <= score <= 10.0:
        raise TaskError(f"judge score {score} outside the 0-10 rubric")
    return score


def judge_score(generated: str, reference: str, client) -> float:
    """Score a generated report against its reference on the 0-10 rubric."""
    if not generated.strip() or not reference.strip():
        raise TaskError("judge needs two non-empty reports")
    user = (
        "Reference Report:\n\"\"\n" + reference + "\n\"\"\n\n"
        "Candidate Report:\n\"\"\n" + generated + "\n\"\"\n\nScore:"
    )
    bundle = PromptBundle(system_text=JUDGE_SYSTEM, user_text=user)
    try:
        return parse_judge_score(client.complete_bundle(bundle))
    except TaskError:
        retry = PromptBundle(
            system_text=JUDGE_SYSTEM,
            user_text=user + "\n\nReply with a single number from 0 to 10 only.",
        )
        return parse_judge_score(client.complete_bundle(retry))


# ------------------------------------------------------------- checklists


def checklist_accuracy(pred_vectors, ref_vectors) -> float:
    """Two-stage accuracy: mean over items within a case, then over cases.

    This deliberately differs from pooled item accuracy: every case counts
    equally regardless of how many checklist items it carries.
    """
    if len(pred_vectors) != len(ref_vectors) or not pred_vectors:
        raise MetricUndefinedError("need matching, non-empty case vectors")
    case_accs = []
    for preds, refs in zip(pred_vectors, ref_vectors):
        if len(preds) != len(refs) or not preds:
            raise MetricUndefinedError("per-case item vectors must match and be non-empty")
        case_accs.append(float(np.mean([p == r for p, r in zip(preds, refs)])))
    return float(np.mean(case_accs))


# ---------------------------------------------------------------- survival


@dataclass(frozen=True)
class SurvivalRecord:
    """Follow-up time in months, event indicator (False = censored), group."""

    time: float
    event: bool
    group: int = 0

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("survival time must be non-negative")


@dataclass
class KMCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray

    def validate(self) -> None:
        if self.survival.size:
            assert self.survival[0] <= 1.0 + 1e-12
            assert np.all(np.diff(self.survival) <= 1e-12)
            assert np.all((self.survival >= -1e-12) & (self.survival <= 1 + 1e-12))


@dataclass
class LogRankResult:
    chi_squared: float
    df: int
    p_value: float


@dataclass
class BootstrapResult:
    estimate: float
    lower: float
    upper: float
    replicates: int


def km_estimate(records: list[SurvivalRecord]) -> KMCurve:
    """Product-limit survival estimate under right-censoring.

    At each distinct event time t: S <- S * (1 - d/n) with n the number still
    at risk (time >= t). Censored records shrink future risk sets only.
    """
    if not records:
        raise MetricUndefinedError("empty survival group")
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    event_times = np.unique(times[events])
    surv = []
    at_risk = []
    s = 1.0
    for t in event_times:
        n = int((times >= t).sum())
        d = int((events & (times == t)).sum())
        s *= 1.0 - d / n
        surv.append(s)
        at_risk.append(n)
    curve = KMCurve(
        times=event_times,
        survival=np.array(surv, dtype=float),
        at_risk=np.array(at_risk, dtype=int),
    )
    curve.validate()
    return curve


def logrank_test(
    records: list[SurvivalRecord], expected_groups: list | None = None
) -> LogRankResult:
    """Chi-squared log-rank test across the groups present in `records`.

    Observed and expected event counts are aggregated over distinct event
    times; the variance-covariance matrix is the hypergeometric one over the
    first G-1 groups. A singular matrix falls back to the pseudo-inverse with
    df = rank. When `expected_groups` is given, every listed group must be
    non-empty.
    """
    if not records:
        raise MetricUndefinedError("no survival records")
    groups = sorted({r.group for r in records})
    if expected_groups is not None:
        missing = [g for g in expected_groups if g not in groups]
        if missing:
            raise MetricUndefinedError(f"groups with no records: {missing}")
    if len(groups) < 2:
        raise MetricUndefinedError("log-rank needs at least two non-empty groups")
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    gidx = np.array([groups.index(r.group) for r in records], dtype=int)
    if not events.any():
        raise MetricUndefinedError("log-rank needs at least one observed event")

    G = len(groups)
    O = np.zeros(G)
    E = np.zeros(G)
    V = np.zeros((G - 1, G - 1))
    for t in np.unique(times[events]):
        at_risk = times >= t
        N = int(at_risk.sum())
        if N < 1:
            continue
        dead = events & (times == t)
        D = int(dead.sum())
        n_j = np.array([(at_risk & (gidx == j)).sum() for j in range(G)], dtype=float)
        d_j = np.array([(dead & (gidx == j)).sum() for j in range(G)], dtype=float)
        O += d_j
        E += D * n_j / N
        if N > 1:
            frac = n_j[: G - 1] / N
            V += (
                D
                * (N - D)
                / (N - 1)
                * (np.diag(frac) - np.outer(frac, frac))
            )
    diff = (O - E)[: G - 1]
    rank = int(np.linalg.matrix_rank(V)) if V.size else 0
    if rank == 0:
        return LogRankResult(chi_squared=0.0, df=G - 1, p_value=1.0)
    chi2 = float(diff @ np.linalg.pinv(V) @ diff)
    df = rank if rank < G - 1 else G - 1
    p = float(sps.chi2.sf(chi2, df))
    return LogRankResult(chi_squared=chi2, df=df, p_value=p)


# ---------------------------------------------------------------- bootstrap


def bootstrap_ci(
    values,
    B: int = 1000,
    rng: np.random.Generator | None = None,
    stat=np.mean,
) -> BootstrapResult:
    """Case-level bootstrap with percentile 95% bounds.

    Resamples the values with replacement B times; deterministic for a given
    generator state. The mean statistic is vectorized.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise MetricUndefinedError("cannot bootstrap an empty sample")
    if B < 1:
        raise MetricUndefinedError("need at least one bootstrap replicate")
    if rng is None:
        rng = np.random.default_rng(0)
    n = values.size
    idx = rng.integers(0, n, size=(B, n))
    if stat is np.mean:
        reps = values[idx].mean(axis=1)
    else:
        reps = np.array([stat(values[row]) for row in idx])
    lower, upper = np.percentile(reps, [2.5, 97.5])
    return BootstrapResult(
        estimate=float(stat(values)),
        lower=float(lower),
        upper=float(upper),
        replicates=B,
    )


# ------------------------------------------------------------ paired tests


@dataclass
class PairedTestResult:
    t_statistic: float
    df: int
    p_value: float
    degenerate: bool = False


def paired_t_test(values_a, values_b) -> PairedTestResult:
    """Two-sided paired t test on per-case differences (n - 1 df).

    All-zero differences are degenerate: p = 1 by convention, flagged.
    """
    a = np.asarray(values_a, dtype=float)
    b = np.asarray(values_b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise MetricUndefinedError("paired test needs two equal-length samples, n >= 2")
    d = a - b
    if np.all(d == 0):
        return PairedTestResult(t_statistic=0.0, df=a.size - 1, p_value=1.0, degenerate=True)
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        # Identical nonzero differences: infinitely strong evidence.
        return PairedTestResult(t_statistic=float("inf"), df=n - 1, p_value=0.0)
    t = float(d.mean() / (sd / np.sqrt(n)))
    p = float(2 * sps.t.sf(abs(t), n - 1))
    return PairedTestResult(t_statistic=t, df=n - 1, p_value=p)
