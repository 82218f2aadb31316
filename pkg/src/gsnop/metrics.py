from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import UsageError

BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class RankedQuery:
    positive: float
    negatives: np.ndarray

    def rank(self) -> int:
        """1-based rank of the positive; ties count against it."""
        return 1 + int(np.count_nonzero(np.asarray(self.negatives) >= self.positive))


@dataclass
class MetricReport:
    ap: float
    mrr: float
    n_queries: int
    # mean loss per time bucket, None where a bucket is empty
    bucket_loss: list[Optional[float]] = field(default_factory=list)
    bucket_counts: list[int] = field(default_factory=list)
    bucket_edges: list[float] = field(default_factory=list)
    mean_loss: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def mrr(queries: Sequence[RankedQuery]) -> float:
    if not queries:
        raise UsageError("mrr needs at least one query")
    return float(np.mean([1.0 / q.rank() for q in queries]))


def average_precision(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Negatives sort ahead of positives on equal scores.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n_pos = np.count_nonzero(labels > 0)
    if n_pos == 0:
        raise UsageError("average_precision needs at least one positive")
    order = np.lexsort((labels, -scores))
    hits = labels[order] > 0
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision[hits]) / n_pos)


def pooled_average_precision(queries: Sequence[RankedQuery]) -> float:
    labels = np.concatenate([np.r_[1.0, np.zeros(len(q.negatives))] for q in queries])
    scores = np.concatenate([np.r_[q.positive, q.negatives] for q in queries])
    return average_precision(labels, scores)


def _bucket_index(times: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Bucket of each time as a fraction of [min, max]; the last bucket is closed."""
    edges = np.asarray(edges, dtype=np.float64)
    if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
        raise UsageError(f"bucket edges must increase from 0 to 1, got {edges.tolist()}")
    times = np.asarray(times, dtype=np.float64)
    span = times.max() - times.min() if len(times) else 0.0
    frac = (times - times.min()) / span if span > 0 else np.zeros_like(times)
    index = np.searchsorted(edges, frac, side="right") - 1
    return np.clip(index, 0, len(edges) - 2)


def time_group_loss(
    times: np.ndarray, losses: np.ndarray, edges: Sequence[float]
) -> list[Optional[float]]:
    """Mean loss per fractional time bucket of the test duration."""
    losses = np.asarray(losses, dtype=np.float64)
    index = _bucket_index(times, edges)
    out: list[Optional[float]] = []
    for b in range(len(edges) - 1):
        selected = losses[index == b]
        out.append(float(selected.mean()) if len(selected) else None)
    return out


def arrival_histogram(times: np.ndarray, edges: Sequence[float]) -> list[int]:
    index = _bucket_index(times, edges)
    return np.bincount(index, minlength=len(edges) - 1).tolist()


def binary_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))


def build_report(
    positive: np.ndarray,
    negatives: np.ndarray,
    times: np.ndarray,
    edges: Sequence[float],
) -> MetricReport:
    """Metrics for queries given as (Q,) positive and (Q, n) negative scores."""
    queries = [RankedQuery(float(p), n) for p, n in zip(positive, negatives)]
    losses = binary_cross_entropy(
        np.concatenate([positive[:, None], negatives], axis=1),
        np.concatenate([np.ones((len(positive), 1)), np.zeros(negatives.shape)], axis=1),
    ).mean(axis=1)
    return MetricReport(
        ap=pooled_average_precision(queries),
        mrr=mrr(queries),
        n_queries=len(queries),
        bucket_loss=time_group_loss(times, losses, edges),
        bucket_counts=arrival_histogram(times, edges),
        bucket_edges=[float(e) for e in edges],
        mean_loss=float(losses.mean()),
    )
