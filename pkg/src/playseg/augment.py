"""Grow a small annotated split with labelled segments extracted from play data."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import (
    BoundaryRegressor,
    FrameClassifier,
    LengthStats,
    boundarycrop_extract,
    framecrop_extract,
    random_segment_extract,
)
from .core import NUM_INSTRUCTIONS, Dataset, Instruction, LabelledSegment, Trajectory
from .features import FeatureBank
from .segmenter import SegmenterConfig, label_segments, segment_play_trajectory


@dataclass
class Threshold:
    value: float
    accuracy: Optional[float]
    kept: int
    reachable: bool


def confidence_threshold_from_validation(model, validation: Dataset, target_acc: float = 0.9,
                                         bank: Optional[FeatureBank] = None) -> Threshold:
    """Smallest confidence cut whose surviving validation segments reach ``target_acc``.

    If no cut reaches the target the highest observed confidence is returned
    with ``reachable=False``.
    """
    if len(validation) == 0:
        raise ValueError("empty validation set")
    bank = bank if bank is not None else FeatureBank()
    conf, correct = [], []
    by_traj: dict[str, list[LabelledSegment]] = {}
    for seg in validation.annotated:
        by_traj.setdefault(seg.trajectory_id, []).append(seg)
    for tid, segs in by_traj.items():
        d = model.label_dists(validation.trajectories[tid], [s.start for s in segs], [s.end for s in segs], bank)
        conf.extend(d.max(axis=1))
        correct.extend(d.argmax(axis=1) == np.array([s.instruction.label_id for s in segs]))
    return threshold_sweep(np.array(conf), np.array(correct, dtype=bool), target_acc)


def threshold_sweep(conf: np.ndarray, correct: np.ndarray, target_acc: float) -> Threshold:
    if len(conf) == 0:
        raise ValueError("empty validation set")
    if correct.mean() >= target_acc:
        return Threshold(0.0, float(correct.mean()), len(conf), True)
    order = np.argsort(conf, kind="stable")
    c_sorted, ok_sorted = conf[order], correct[order]
    # suffix accuracy of {conf >= c_sorted[i]}; equal confidences share a cut
    suffix_ok = np.cumsum(ok_sorted[::-1])[::-1]
    suffix_n = np.arange(len(conf), 0, -1)
    for i in range(len(conf)):
        if i > 0 and c_sorted[i] == c_sorted[i - 1]:
            continue
        acc = suffix_ok[i] / suffix_n[i]
        if acc >= target_acc:
            return Threshold(float(c_sorted[i]), float(acc), int(suffix_n[i]), True)
    top = float(c_sorted[-1])
    mask = conf >= top
    return Threshold(top, float(correct[mask].mean()), int(mask.sum()), False)


class PSExtractor:
    """Exact-segmentation extractor; each trajectory is segmented once."""

    method = "ps"
    exhaustive = True

    def __init__(self, model, cfg: SegmenterConfig):
        self.model = model
        self.cfg = cfg
        self.logs: list[dict] = []

    def extract(self, traj: Trajectory, rng, bank: FeatureBank) -> list[LabelledSegment]:
        segs, run = segment_play_trajectory(self.model, traj, self.cfg, bank)
        self.logs.append(run.to_dict())
        return label_segments(self.model, traj, segs, bank, method=self.method)


class RandomExtractor:
    method = "random"
    exhaustive = False

    def __init__(self, stats: LengthStats, labeller):
        self.stats, self.labeller = stats, labeller

    def extract(self, traj, rng, bank):
        seg = random_segment_extract(self.stats, traj, self.labeller, rng, bank)
        return [] if seg is None else [seg]


class FrameCropExtractor:
    method = "framecrop"
    exhaustive = False

    def __init__(self, classifier: FrameClassifier):
        self.classifier = classifier

    def extract(self, traj, rng, bank):
        seg = framecrop_extract(self.classifier, traj, rng, bank)
        return [] if seg is None else [seg]


class BoundaryCropExtractor:
    method = "boundarycrop"
    exhaustive = False

    def __init__(self, regressor: BoundaryRegressor):
        self.regressor = regressor

    def extract(self, traj, rng, bank):
        seg = boundarycrop_extract(self.regressor, traj, rng, bank)
        return [] if seg is None else [seg]


@dataclass
class AugmentResult:
    dataset: Dataset
    added: list[LabelledSegment] = field(default_factory=list)
    shortfall: int = 0
    draws: int = 0
    rejected_confidence: int = 0
    rejected_duplicate: int = 0

    def provenance(self) -> list[dict]:
        return [
            {"trajectory_id": s.trajectory_id, "t0": s.start, "t1": s.end, "label_id": s.instruction.label_id,
             "confidence": round(s.confidence, 12), "method": s.method}
            for s in self.added
        ]


def run_augmentation(starting: Dataset, unannotated: Sequence[Trajectory], extractor, target_size: int,
                     seed: int = 0, threshold: Optional[float] = None, max_draws: Optional[int] = None,
                     bank: Optional[FeatureBank] = None) -> AugmentResult:
    """Add extracted segments to ``starting`` until it holds ``target_size`` segments.

    Trajectories are visited round-robin in a seeded order. Segments below
    ``threshold`` confidence or repeating an existing ``(trajectory, start,
    end)`` are skipped. ``starting`` itself is never modified.
    """
    if target_size < len(starting):
        raise ValueError("target size below the starting split size")
    bank = bank if bank is not None else FeatureBank()
    rng = np.random.default_rng(seed)
    order = [unannotated[i] for i in rng.permutation(len(unannotated))]
    seen = {s.key for s in starting.annotated}
    result = AugmentResult(Dataset(list(starting.annotated), dict(starting.trajectories), split_tag="augmented"))
    need = target_size - len(starting)

    def offer(seg: LabelledSegment, traj: Trajectory) -> None:
        if threshold is not None and seg.confidence < threshold:
            result.rejected_confidence += 1
            return
        if seg.key in seen:
            result.rejected_duplicate += 1
            return
        seen.add(seg.key)
        result.added.append(seg)
        result.dataset.trajectories.setdefault(traj.id, traj)

    if need > 0 and order:
        if extractor.exhaustive:
            pools = []
            for traj in order:
                result.draws += 1
                pools.append((traj, extractor.extract(traj, rng, bank)))
            depth = max((len(p) for _, p in pools), default=0)
            for i in range(depth):
                for traj, pool in pools:
                    if len(result.added) >= need:
                        break
                    if i < len(pool):
                        offer(pool[i], traj)
        else:
            budget = max_draws if max_draws is not None else 50 * need
            while len(result.added) < need and result.draws < budget:
                traj = order[result.draws % len(order)]
                result.draws += 1
                for seg in extractor.extract(traj, rng, bank):
                    offer(seg, traj)
                    if len(result.added) >= need:
                        break
    result.added = result.added[:need] if need > 0 else []
    result.dataset.annotated = list(starting.annotated) + result.added
    result.shortfall = max(0, need - len(result.added))
    return result


def relabel(segments: Sequence[LabelledSegment], trajectories: dict[str, Trajectory], labeller,
            method: str = "relabel", bank: Optional[FeatureBank] = None) -> list[LabelledSegment]:
    """Replace labels with the labeller's argmax (confidence = max probability)."""
    bank = bank if bank is not None else FeatureBank()
    out = []
    for seg in segments:
        d = labeller.label_dists(trajectories[seg.trajectory_id], [seg.start], [seg.end], bank)[0]
        lab = int(np.argmax(d))
        out.append(LabelledSegment(seg.trajectory_id, seg.start, seg.end, Instruction(lab),
                                   float(min(1.0, d[lab])), method))
    return out


def dataset_stats(dataset: Dataset | Sequence[LabelledSegment]) -> dict:
    segs = dataset.annotated if isinstance(dataset, Dataset) else list(dataset)
    labels = [0] * NUM_INSTRUCTIONS
    for s in segs:
        labels[s.instruction.label_id] += 1
    lengths = Counter(s.length for s in segs)
    return {
        "size": len(segs),
        "labels": labels,
        "lengths": {str(k): lengths[k] for k in sorted(lengths)},
    }
