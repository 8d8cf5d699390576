"""Segmentation quality metrics."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .core import LabelledSegment, Segmentation


def boundary_points(segments: Iterable) -> set[int]:
    """Boundary indices claimed by a set of segments.

    A segment ``(s, e)`` claims that a segment ends at boundary ``e - 1`` and,
    when ``s > 0``, that the previous one ended at ``s - 1``.
    """
    out = set()
    for seg in segments:
        s, e = (seg.start, seg.end) if isinstance(seg, LabelledSegment) else seg
        out.add(e - 1)
        if s > 0:
            out.add(s - 1)
    return out


def _as_points(x) -> list[int]:
    if isinstance(x, Segmentation):
        return x.ends()
    return sorted(set(int(v) for v in x))


def match_boundaries(predicted, gt, tolerance: int = 0) -> int:
    """Greedy one-to-one matches within ``tolerance`` steps.

    Predictions are visited in increasing order and each takes the earliest
    unmatched ground-truth point in range; on a line this gives a maximum
    matching.
    """
    P = _as_points(predicted)
    G = _as_points(gt)
    if tolerance == 0:
        return len(set(P) & set(G))
    matched, j = 0, 0
    for p in P:
        while j < len(G) and G[j] < p - tolerance:
            j += 1
        if j < len(G) and G[j] <= p + tolerance:
            matched += 1
            j += 1
    return matched


def boundary_precision_recall(predicted, gt, tolerance: int = 0) -> tuple[Optional[float], float]:
    """``(precision, recall)``; precision is None when nothing was predicted."""
    P = _as_points(predicted)
    G = _as_points(gt)
    if not G:
        raise ValueError("ground truth must contain at least one boundary")
    m = match_boundaries(P, G, tolerance)
    precision = m / len(P) if P else None
    return precision, m / len(G)


@dataclass
class BoundaryCounts:
    """Micro-averaged precision/recall accumulator over many trajectories."""

    matched: int = 0
    predicted: int = 0
    gt: int = 0

    def add(self, predicted, gt, tolerance: int = 0) -> None:
        P, G = _as_points(predicted), _as_points(gt)
        self.matched += match_boundaries(P, G, tolerance)
        self.predicted += len(P)
        self.gt += len(G)

    @property
    def precision(self) -> Optional[float]:
        return self.matched / self.predicted if self.predicted else None

    @property
    def recall(self) -> Optional[float]:
        return self.matched / self.gt if self.gt else None


def f1(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None:
        return None
    if precision == 0 or recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def active_labels(gt_segments: Sequence[LabelledSegment], T: int) -> list[Optional[int]]:
    """Ground-truth instruction id active at each step ``0 .. T-1``."""
    out: list[Optional[int]] = [None] * T
    for seg in gt_segments:
        for t in range(seg.start, min(seg.end, T)):
            out[t] = seg.instruction.label_id
    return out


def majority_label(active: Sequence[Optional[int]], start: int, end: int) -> Optional[int]:
    """Most frequent active label over steps ``start .. end-1``; earliest wins ties."""
    window = [a for a in active[start:end] if a is not None]
    if not window:
        return None
    counts = Counter(window)
    top = max(counts.values())
    for a in window:
        if counts[a] == top:
            return a
    return None


@dataclass
class LabelScore:
    majority_correct: int = 0
    strict_correct: int = 0
    total: int = 0

    def add(self, predicted: Sequence[LabelledSegment], gt_segments: Sequence[LabelledSegment], T: int) -> None:
        active = active_labels(gt_segments, T)
        exact = {(g.start, g.end): g.instruction.label_id for g in gt_segments}
        for seg in predicted:
            lab = seg.instruction.label_id
            self.total += 1
            self.majority_correct += int(majority_label(active, seg.start, seg.end) == lab)
            self.strict_correct += int(exact.get((seg.start, seg.end)) == lab)

    @property
    def majority(self) -> Optional[float]:
        return self.majority_correct / self.total if self.total else None

    @property
    def strict(self) -> Optional[float]:
        return self.strict_correct / self.total if self.total else None


def label_accuracy(predicted: Sequence[LabelledSegment], record) -> tuple[Optional[float], Optional[float]]:
    """``(majority_rule, strict)`` label accuracy against a play record.

    Both are lower bounds: one behaviour can satisfy two instructions.
    """
    score = LabelScore()
    score.add(predicted, record.segments(), record.trajectory.T)
    return score.majority, score.strict


def iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0
