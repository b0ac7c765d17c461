"""Average precision, mAP, accuracy and confusion matrices."""

from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np


class UndefinedAPError(ValueError):
    """AP requested for a class with no relevant items."""


def average_precision(scores: Sequence[float], relevance: Sequence[bool]) -> float:
    """All-points AP: mean of precision@k over the ranks k of relevant items.

    Ranking is by descending score; equal scores keep their original order.
    Accumulated as an exact fraction and rounded once.
    """
    s = np.asarray(scores, dtype=np.float64)
    r = np.asarray(relevance, dtype=bool)
    if s.shape != r.shape or s.ndim != 1:
        raise ValueError("scores and relevance must be equal-length 1-D sequences")
    total = int(r.sum())
    if total == 0:
        raise UndefinedAPError("no relevant items")
    order = np.argsort(-s, kind="stable")
    hits = r[order]
    ranks = np.nonzero(hits)[0] + 1
    return float(sum(Fraction(k, int(rank)) for k, rank in enumerate(ranks, start=1)) / total)


def per_class_ap(scores: np.ndarray, label_sets: Sequence[Sequence[int]]) -> dict[int, float]:
    """AP of every class with at least one positive; ``scores`` is ``[N, K]``."""
    scores = np.asarray(scores, dtype=np.float64)
    n, k = scores.shape
    rel = np.zeros((n, k), dtype=bool)
    for i, labels in enumerate(label_sets):
        rel[i, list(labels)] = True
    out = {}
    for c in range(k):
        if rel[:, c].any():
            out[c] = average_precision(scores[:, c], rel[:, c])
    return out


def mean_average_precision(aps) -> float:
    """Unweighted mean over the classes that have a defined AP.

    Accepts either a mapping ``class -> AP`` or a ``(scores, label_sets)`` pair.
    """
    if isinstance(aps, tuple) and len(aps) == 2:
        aps = per_class_ap(*aps)
    values = list(aps.values()) if isinstance(aps, dict) else list(aps)
    if not values:
        raise UndefinedAPError("no evaluable class")
    return float(np.mean(values))


def confusion_matrix(predictions: Sequence[int], truths: Sequence[int], k: int) -> np.ndarray:
    """``m[i, j]`` counts samples of true class i predicted as j."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    if p.size and (p.min() < 0 or t.min() < 0 or p.max() >= k or t.max() >= k):
        raise IndexError(f"class index out of range for K={k}")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    p, t = np.asarray(predictions), np.asarray(truths)
    return float((p == t).mean()) if p.size else 0.0


def format_report(aps: dict[int, float], class_names: Sequence[str], acc: float | None = None,
                  confusion: np.ndarray | None = None) -> str:
    lines = [f"class {class_names[c]} ap {aps[c]!r}" for c in sorted(aps)]
    lines.append(f"map {mean_average_precision(aps)!r}")
    if acc is not None:
        lines.append(f"accuracy {acc!r}")
    if confusion is not None:
        lines.append(format_confusion(confusion, class_names))
    return "\n".join(lines)


def format_confusion(m: np.ndarray, class_names: Sequence[str]) -> str:
    width = max([len(n) for n in class_names] + [len(str(int(m.max()))) if m.size else 1])
    head = " " * width + " " + " ".join(n.rjust(width) for n in class_names)
    rows = [class_names[i].rjust(width) + " " + " ".join(str(int(v)).rjust(width) for v in m[i])
            for i in range(len(class_names))]
    return "\n".join([head] + rows)
