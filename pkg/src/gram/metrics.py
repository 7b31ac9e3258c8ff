"""Ranking metrics: AUC, cold-start AUC, MRR, nDCG@k.

AUC uses the rank-based Mann-Whitney form with midrank tie handling
(O(n log n)); the brute-force pairwise version lives in the tests as an
oracle. nDCG uses binary gain with the 1/log2(rank+1) discount and an
ideal DCG computed from the group's positive count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScoredLabel",
    "UndefinedMetricError",
    "auc",
    "cs_auc",
    "mrr",
    "ndcg_at_k",
    "group_by",
]


class UndefinedMetricError(ValueError):
    """The metric is not defined on the given inputs (e.g. single-class
    labels for AUC, or a group without positives for MRR/nDCG)."""


@dataclass(frozen=True)
class ScoredLabel:
    score: float
    label: int
    item_id: int = -1
    group_id: int = -1

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


def _arrays(pairs):
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return scores, labels


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied scores sharing their average rank."""
    n = len(scores)
    idx = np.argsort(scores, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and scores[idx[j]] == scores[idx[i]]:
            j += 1
        ranks[idx[i:j]] = 0.5 * (i + j + 1)  # average of 1-based ranks i+1..j
        i = j
    return ranks


def auc_from_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _midranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc(pairs) -> float:
    """Probability that a random positive outscores a random negative,
    ties counting one half."""
    scores, labels = _arrays(list(pairs))
    if len(scores) == 0:
        raise UndefinedMetricError("AUC of an empty list")
    return auc_from_arrays(scores, labels)


def cs_auc(pairs, cs_items) -> float:
    """AUC restricted to predictions on cold-start items."""
    cs = set(cs_items)
    if not cs:
        raise UndefinedMetricError("cold-start item set is empty")
    subset = [p for p in pairs if p.item_id in cs]
    if not subset:
        raise UndefinedMetricError("no predictions fall on cold-start items")
    return auc(subset)


def group_by(pairs) -> list[list[ScoredLabel]]:
    groups: dict[int, list[ScoredLabel]] = {}
    for p in pairs:
        groups.setdefault(p.group_id, []).append(p)
    return [groups[k] for k in sorted(groups)]


def _ranked_labels(group) -> np.ndarray:
    """Labels sorted by score descending; ties keep input order (stable)."""
    scores, labels = _arrays(group)
    order = np.argsort(-scores, kind="stable")
    return labels[order]


def mrr(groups) -> float:
    """Mean reciprocal rank of each group's first positive."""
    groups = list(groups)
    if not groups:
        raise UndefinedMetricError("MRR of zero groups")
    total = 0.0
    for g in groups:
        ranked = _ranked_labels(g)
        hits = np.flatnonzero(ranked == 1)
        if hits.size == 0:
            raise UndefinedMetricError("MRR group without a positive")
        total += 1.0 / (hits[0] + 1)
    return total / len(groups)


def ndcg_at_k(groups, k: int) -> float:
    """Mean nDCG@k with binary gains and 1/log2(rank+1) discount."""
    if k < 1:
        raise ValueError("k must be positive")
    groups = list(groups)
    if not groups:
        raise UndefinedMetricError("nDCG of zero groups")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    total = 0.0
    for g in groups:
        ranked = _ranked_labels(g)
        n_pos = int(ranked.sum())
        if n_pos == 0:
            raise UndefinedMetricError("nDCG group without a positive")
        top = ranked[:k]
        dcg = float((top * discounts[: len(top)]).sum())
        idcg = float(discounts[: min(n_pos, k)].sum())
        total += dcg / idcg
    return total / len(groups)
