"""Pixel-wise F1 evaluation and retrieval-quality reporting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ShapeError
from .refdb import MatchCriteria, ReferenceDatabase, classify_match, retrieve_topk


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accumulate(pred: np.ndarray, gt: np.ndarray, acc: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add one (prediction, ground truth) mask pair into the counts."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    delta = ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )
    return delta if acc is None else acc + delta


def f1(acc: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 0 when the denominator is 0."""
    denom = 2 * acc.tp + acc.fp + acc.fn
    return 2.0 * acc.tp / denom if denom else 0.0


def precision(acc: ConfusionCounts) -> float:
    denom = acc.tp + acc.fp
    return acc.tp / denom if denom else 0.0


def recall(acc: ConfusionCounts) -> float:
    denom = acc.tp + acc.fn
    return acc.tp / denom if denom else 0.0


def retrieval_report(queries, db: ReferenceDatabase, criteria: MatchCriteria):
    """(strict top-1 rate, coarse top-1 rate) over (descriptor, pose, sequence)
    queries. A strict top-1 also counts as coarse, so strict <= coarse."""
    if not db.entries:
        raise ValueError("empty database")
    strict = coarse = 0
    n = 0
    for descriptor, pose, sequence in queries:
        (top,), _ = retrieve_topk(descriptor, db, 1)
        grade = classify_match(pose, top, criteria, query_sequence=sequence)
        if grade == "strict":
            strict += 1
            coarse += 1
        elif grade == "coarse":
            coarse += 1
        n += 1
    if n == 0:
        return 0.0, 0.0
    return strict / n, coarse / n
