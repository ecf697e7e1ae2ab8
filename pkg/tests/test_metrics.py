"""Tests for AUC, gAUC, log loss, category histograms and timing."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tf4ctr.errors import ArgumentError, MetricUndefinedError
from tf4ctr.metrics import ScoredSet, auc, categorize, gauc, logloss, report, timeit
from tf4ctr.models import SampleCategory, SampleClass


def _pairwise_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize(
    "scores, labels, expected",
    [
        ([0.9, 0.8, 0.1], [1, 1, 0], 1.0),
        ([0.5, 0.5], [1, 0], 0.5),
        ([0.9, 0.6, 0.5, 0.4], [1, 0, 1, 0], 0.75),
    ],
)
def test_auc_examples(scores, labels, expected):
    assert auc(ScoredSet(scores=scores, labels=labels)) == pytest.approx(expected, abs=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(MetricUndefinedError):
        auc(ScoredSet(scores=[0.1, 0.2], labels=[1, 1]))


def test_scored_set_validation():
    with pytest.raises(ArgumentError):
        ScoredSet(scores=[0.1, 0.2], labels=[1])
    with pytest.raises(ArgumentError):
        ScoredSet(scores=[0.1, 0.2], labels=[1, 2])
    with pytest.raises(ArgumentError):
        ScoredSet(scores=[0.1, 0.2], labels=[1, 0], user_ids=["a"])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0]), st.integers(0, 1)),
        min_size=2,
        max_size=200,
    )
)
def test_rank_auc_matches_pairwise_counting(rows):
    """Average-rank AUC equals brute-force pair counting, ties included."""
    scores, labels = zip(*rows)
    if len(set(labels)) < 2:
        return
    value = auc(ScoredSet(scores=scores, labels=labels))
    assert value == pytest.approx(_pairwise_auc(scores, labels), abs=1e-12)


def test_rank_auc_matches_pairwise_counting_on_random_instances(rng):
    """A thousand random instances with up to 200 rows and injected ties."""
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [1, 0]
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        assert auc(ScoredSet(scores=scores, labels=labels)) == wins / (len(pos) * len(neg))


def test_auc_is_invariant_under_increasing_transforms(rng):
    scores = rng.random(300)
    labels = (rng.random(300) < scores).astype(int)
    base = auc(ScoredSet(scores=scores, labels=labels))
    assert auc(ScoredSet(scores=scores**3, labels=labels)) == pytest.approx(base, abs=1e-12)
    squashed = 1.0 / (1.0 + np.exp(-(5.0 * scores - 2.0)))
    assert auc(ScoredSet(scores=squashed, labels=labels)) == pytest.approx(base, abs=1e-12)
    flipped = auc(ScoredSet(scores=scores, labels=1 - labels))
    assert base + flipped == pytest.approx(1.0, abs=1e-12)


def test_gauc_weights_users_by_impressions():
    """Per-user AUCs 1.0 and 0.5 with two impressions each average to 0.75."""
    s = ScoredSet(
        scores=[0.9, 0.1, 0.5, 0.5],
        labels=[1, 0, 1, 0],
        user_ids=["a", "a", "b", "b"],
    )
    assert gauc(s) == pytest.approx(0.75, abs=1e-12)


def test_gauc_matches_the_weighted_average_of_user_aucs(rng):
    for _ in range(100):
        n = int(rng.integers(10, 120))
        users = rng.integers(0, 8, size=n)
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, size=n)
        users[:2], labels[:2] = 0, [1, 0]

        weighted, impressions = 0.0, 0
        for user in np.unique(users):
            mine = users == user
            if len(set(labels[mine])) < 2:
                continue
            weighted += mine.sum() * _pairwise_auc(scores[mine], labels[mine])
            impressions += mine.sum()

        s = ScoredSet(scores=scores, labels=labels, user_ids=[f"u{u}" for u in users])
        assert gauc(s) == pytest.approx(weighted / impressions, abs=1e-12)


def test_gauc_skips_single_class_users():
    s = ScoredSet(
        scores=[0.9, 0.1, 0.3, 0.4, 0.8],
        labels=[1, 0, 1, 1, 1],
        user_ids=["a", "a", "b", "b", "b"],
    )
    assert gauc(s) == pytest.approx(1.0)


def test_gauc_absent_without_users_or_qualifying_users():
    assert gauc(ScoredSet(scores=[0.9, 0.1], labels=[1, 0])) is None
    single = ScoredSet(scores=[0.9, 0.1], labels=[1, 0], user_ids=["a", "b"])
    assert gauc(single) is None


def test_logloss_matches_closed_form():
    s = ScoredSet(scores=[0.9, 0.5], labels=[1, 0])
    assert logloss(s) == pytest.approx((-np.log(0.9) - np.log(0.5)) / 2, abs=1e-12)
    assert np.isfinite(logloss(ScoredSet(scores=[0.0, 1.0], labels=[1, 0])))
    with pytest.raises(MetricUndefinedError):
        logloss(ScoredSet(scores=[], labels=[]))


@pytest.mark.parametrize(
    "score, label, sample_class, category",
    [
        (0.7, 1, SampleClass.POSITIVE, SampleCategory.WELL),
        (0.6, 1, SampleClass.POSITIVE, SampleCategory.WELL),
        (0.45, 1, SampleClass.POSITIVE, SampleCategory.POORLY),
        (0.25, 1, SampleClass.POSITIVE, SampleCategory.MISCLASSIFIED),
        (0.25, 0, SampleClass.NEGATIVE, SampleCategory.WELL),
        (0.5, 0, SampleClass.NEGATIVE, SampleCategory.POORLY),
        (0.9, 0, SampleClass.NEGATIVE, SampleCategory.MISCLASSIFIED),
    ],
)
def test_categorize_examples(score, label, sample_class, category):
    hist = categorize(ScoredSet(scores=[score], labels=[label]), 0.3, 0.6)
    assert hist.count(sample_class, category) == 1
    assert hist.total == 1


def test_categorize_partitions_the_dataset(rng):
    scores = rng.random(500)
    labels = rng.integers(0, 2, 500)
    hist = categorize(ScoredSet(scores=scores, labels=labels), 0.2, 0.6)
    assert hist.total == 500
    rows = hist.to_rows(epoch=3, split="test")
    assert len(rows) == 6
    assert sum(r["count"] for r in rows) == 500
    assert {r["class"] for r in rows} == {"positive", "negative"}


def test_categorize_rejects_bad_thresholds():
    s = ScoredSet(scores=[0.5], labels=[1])
    with pytest.raises(ArgumentError):
        categorize(s, 0.6, 0.3)
    with pytest.raises(ArgumentError):
        categorize(s, -0.1, 0.6)


def test_report_handles_single_class_split():
    s = ScoredSet(scores=[0.8, 0.9], labels=[1, 1])
    result = report(s, "test", (0.3, 0.6), epoch=2, seconds=0.5)
    assert result.auc is None
    assert result.gauc is None
    assert result.n_rows == 2
    assert result.per_sample_ms == pytest.approx(250.0)
    assert result.category_counts.count(SampleClass.POSITIVE, SampleCategory.WELL) == 2


def test_timeit_runs_a_warmup_first():
    calls = []

    def run() -> int:
        calls.append(1)
        return 100

    timing = timeit(run)
    assert len(calls) == 2
    assert timing.rows == 100
    assert timing.per_sample_ms == pytest.approx(1000.0 * timing.seconds / 100)

    assert timeit(lambda: 0, warmup=False).per_sample_ms == 0.0


def test_timeit_keeps_the_fastest_repeat():
    calls = []

    def run() -> int:
        calls.append(1)
        return 10

    timing = timeit(run, repeats=3)
    assert len(calls) == 4
    assert timing.rows == 10
    with pytest.raises(ArgumentError):
        timeit(run, repeats=0)
