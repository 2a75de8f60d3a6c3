"""Binary-classification metrics and the batch evaluation harness.

The six reported metrics are computed from scratch so their tie and
degenerate-case conventions are pinned: ROC-AUC is the Mann-Whitney
statistic with ties counting one half, and PR-AUC is average precision over
the descending-score ranking with ties broken by trial id.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    """The examples cannot produce a metrics report."""


@dataclass(frozen=True)
class ScoredExample:
    trial_id: str
    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite and in [0, 1], got {self.score}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class MetricsReport:
    """The six headline metrics; AUCs are None when only one class is present."""

    accuracy: float
    roc_auc: float | None
    pr_auc: float | None
    precision: float
    recall: float
    f1: float
    n: int
    positives: int

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "positives": self.positives,
            "accuracy": self.accuracy,
            "roc_auc": self.roc_auc,
            "pr_auc": self.pr_auc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def _roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney statistic via tie-averaged ranks."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = float(ranks[labels == 1].sum())
    u_statistic = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_statistic / (n_pos * n_neg)


def _average_precision(examples: list[ScoredExample]) -> float:
    """AP over the descending-score order, ties broken by ascending trial id."""
    ranked = sorted(examples, key=lambda e: (-e.score, e.trial_id))
    n_pos = sum(e.label for e in ranked)
    total = 0.0
    seen_pos = 0
    for rank, example in enumerate(ranked, start=1):
        if example.label == 1:
            seen_pos += 1
            total += seen_pos / rank
    return total / n_pos


def compute_metrics(examples: list[ScoredExample], threshold: float = 0.5) -> MetricsReport:
    """All six metrics at the given decision threshold.

    Precision, recall, and F1 report 0 when their denominators vanish.
    ROC-AUC and PR-AUC are undefined (None) unless both classes appear.
    """
    if not examples:
        raise MetricsError("cannot compute metrics over zero examples")
    scores = np.array([e.score for e in examples])
    labels = np.array([e.label for e in examples])
    decisions = (scores >= threshold).astype(int)

    tp = int(np.sum((decisions == 1) & (labels == 1)))
    fp = int(np.sum((decisions == 1) & (labels == 0)))
    fn = int(np.sum((decisions == 0) & (labels == 1)))

    accuracy = float(np.mean(decisions == labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    n_pos = int(labels.sum())
    both_classes = 0 < n_pos < len(labels)
    return MetricsReport(
        accuracy=accuracy,
        roc_auc=_roc_auc(scores, labels) if both_classes else None,
        pr_auc=_average_precision(examples) if both_classes else None,
        precision=precision,
        recall=recall,
        f1=f1,
        n=len(examples),
        positives=n_pos,
    )


@dataclass(frozen=True)
class EvaluationOutcome:
    report: MetricsReport
    results: list  # (record, PredictionResult) in trial_id order
    failures: list  # (trial_id, message) in trial_id order


def evaluate_dataset(records, pipeline, parallelism: int = 1, threshold: float = 0.5) -> EvaluationOutcome:
    """Run the prediction pipeline over labeled trials and score it.

    Per-trial failures are recorded and excluded from the metrics (n is
    reduced accordingly); if every trial fails there is nothing to score
    and a MetricsError is raised. Aggregation order is by trial id, so the
    outcome is identical at any parallelism.
    """
    records = list(records)
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    for record in records:
        if record.label is None:
            raise MetricsError(f"trial {record.trial_id} has no outcome label")

    def run(record):
        try:
            return record, pipeline(record), None
        except Exception as exc:
            log.warning("prediction failed for %s: %s", record.trial_id, exc)
            return record, None, f"{type(exc).__name__}: {exc}"

    if parallelism == 1:
        raw = [run(record) for record in records]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            raw = list(pool.map(run, records))

    raw.sort(key=lambda item: item[0].trial_id)
    results = [(record, result) for record, result, error in raw if error is None]
    failures = [(record.trial_id, error) for record, _, error in raw if error is not None]
    if not results:
        raise MetricsError("every prediction failed; no examples to score")

    scored = [
        ScoredExample(record.trial_id, result.probability, record.label)
        for record, result in results
    ]
    return EvaluationOutcome(
        report=compute_metrics(scored, threshold=threshold),
        results=results,
        failures=failures,
    )
