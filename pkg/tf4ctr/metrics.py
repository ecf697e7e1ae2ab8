"""AUC, gAUC, log loss, three-category histograms and timing."""

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel

from .diffcore import PROB_EPS
from .errors import ArgumentError, MetricUndefinedError
from .models import CategoryHistogram, MetricsReport, SampleCategory, SampleClass

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class ScoredSet:
    """Predicted scores with their binary labels and optional user keys."""

    scores: np.ndarray
    labels: np.ndarray
    user_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "labels", np.asarray(self.labels).reshape(-1).astype(np.int64))
        if self.scores.shape != self.labels.shape:
            raise ArgumentError("scores and labels must have equal length")
        if self.user_ids is not None:
            users = np.asarray(self.user_ids, dtype=object).reshape(-1)
            if users.shape != self.scores.shape:
                raise ArgumentError("user_ids must match scores in length")
            object.__setattr__(self, "user_ids", users)
        if not np.isin(self.labels, (0, 1)).all():
            raise ArgumentError("labels must be 0 or 1")

    def __len__(self) -> int:
        return int(self.scores.shape[0])


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = int(labels.shape[0]) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    ranks = pd.Series(scores).rank(method="average").to_numpy()
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC from average ranks; ties count one half."""
    return _auc(s.scores, s.labels)


def gauc(s: ScoredSet) -> Optional[float]:
    """Impression-weighted mean of per-user AUC over users with both classes."""
    if s.user_ids is None or len(s) == 0:
        return None
    frame = pd.DataFrame({"user": s.user_ids, "score": s.scores, "label": s.labels})
    weighted, impressions = 0.0, 0
    for _, group in frame.groupby("user", sort=True):
        positives = int(group["label"].sum())
        if positives == 0 or positives == len(group):
            continue
        weighted += len(group) * _auc(group["score"].to_numpy(), group["label"].to_numpy())
        impressions += len(group)
    if impressions == 0:
        return None
    return weighted / impressions


def logloss(s: ScoredSet) -> float:
    if len(s) == 0:
        raise MetricUndefinedError("log loss of an empty set")
    p = np.clip(s.scores, PROB_EPS, 1.0 - PROB_EPS)
    aligned = np.where(s.labels == 1, p, 1.0 - p)
    return float(-np.mean(np.log(aligned)))


def categorize(s: ScoredSet, t_low: float, t_high: float) -> CategoryHistogram:
    """Count well / poorly / misclassified samples per class.

    Negatives are judged on ``1 - score`` with the same thresholds.
    """
    if not 0.0 <= t_low < t_high <= 1.0:
        raise ArgumentError(f"thresholds must satisfy 0 <= t_low < t_high <= 1: {t_low}, {t_high}")
    q = np.where(s.labels == 1, s.scores, 1.0 - s.scores)
    category = np.where(q >= t_high, 2, np.where(q >= t_low, 1, 0))
    order = [SampleCategory.MISCLASSIFIED, SampleCategory.POORLY, SampleCategory.WELL]
    counts = {}
    for sample_class, label in ((SampleClass.POSITIVE, 1), (SampleClass.NEGATIVE, 0)):
        cats = category[s.labels == label]
        counts[sample_class] = {cat: int(np.sum(cats == i)) for i, cat in enumerate(order)}
    return CategoryHistogram(t_low=t_low, t_high=t_high, counts=counts)


class Timing(BaseModel):
    """Wall-clock of one timed phase."""
    seconds: float
    rows: int
    per_sample_ms: float


def timeit(run: Callable[[], int], warmup: bool = True, repeats: int = 1) -> Timing:
    """Time ``run`` (which returns the number of rows it processed).

    A warm-up call is executed first and excluded from the measurement; with
    several repeats the fastest one is kept.
    """
    if repeats < 1:
        raise ArgumentError("repeats must be at least 1")
    if warmup:
        run()
    seconds, rows = math.inf, 0
    for _ in range(repeats):
        start = time.perf_counter()
        rows = int(run())
        seconds = min(seconds, time.perf_counter() - start)
    per_sample_ms = 1000.0 * seconds / rows if rows else 0.0
    return Timing(seconds=seconds, rows=rows, per_sample_ms=per_sample_ms)


def report(
    s: ScoredSet,
    split: str,
    thresholds: tuple[float, float],
    epoch: Optional[int] = None,
    seconds: float = 0.0,
) -> MetricsReport:
    """Every metric of one split; AUC is None when only one class is present."""
    try:
        auc_value: Optional[float] = auc(s)
    except MetricUndefinedError:
        auc_value = None
        logger.warning("AUC undefined for split", split=split, rows=len(s))
    return MetricsReport(
        split=split,
        epoch=epoch,
        auc=auc_value,
        gauc=gauc(s),
        logloss=logloss(s),
        n_rows=len(s),
        category_counts=categorize(s, *thresholds),
        seconds=seconds,
        per_sample_ms=1000.0 * seconds / len(s) if len(s) else 0.0,
    )
