"""Exact maximum-likelihood segmentation of observation windows.

A segment starting at observation ``s`` and ending at boundary index ``k``
(so covering ``o_s .. o_{k+1}``) contributes

    sum_{t in [s + minlen - 1, k)} log(1 - p[s, t]) + log p[s, k]

where ``p[s, t]`` is the completeness probability of window ``o_s .. o_{t+1}``.
Positions closer than ``minlen`` to the segment start cannot end a segment
and contribute nothing.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import (
    Instruction,
    LabelledSegment,
    Observations,
    Segmentation,
    Trajectory,
    boundaries_to_segments,
    segments_to_boundaries,
)
from .features import FeatureBank

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
BRUTE_FORCE_MAX_T = 20


class InfeasibleSegmentation(RuntimeError):
    pass


class WindowScorer(Protocol):
    def segment_probs(self, traj: Trajectory, starts, ends, bank: FeatureBank) -> np.ndarray: ...

    def label_dists(self, traj: Trajectory, starts, ends, bank: FeatureBank) -> np.ndarray: ...


@dataclass(frozen=True)
class SegmenterConfig:
    window: int = 32
    minlen: int = 1
    maxlen: int = 25
    threshold: float = 0.5
    stall_advance: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.minlen <= self.maxlen <= self.window:
            raise ValueError(
                f"need 1 <= minlen <= maxlen <= window, got {self.minlen}, {self.maxlen}, {self.window}"
            )

    @property
    def advance(self) -> int:
        return self.stall_advance if self.stall_advance is not None else self.minlen


@dataclass
class ScoreMatrix:
    """``p[i, j]`` scores window ``o_i .. o_{j+1}``; NaN outside the length band."""

    p: np.ndarray
    minlen: int
    maxlen: int
    nfe: int = 0

    @property
    def T(self) -> int:
        return self.p.shape[0]

    @classmethod
    def from_array(cls, p: np.ndarray, minlen: int = 1, maxlen: Optional[int] = None) -> "ScoreMatrix":
        """Wrap a full square array, masking entries outside the band."""
        T = p.shape[0]
        maxlen = T if maxlen is None else maxlen
        mask = band_mask(T, minlen, maxlen)
        return cls(np.where(mask, p, np.nan), minlen, maxlen, int(mask.sum()))


def band_mask(T: int, minlen: int, maxlen: int) -> np.ndarray:
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    length = j + 1 - i
    return (length >= minlen) & (length <= maxlen)


def band_pair_count(T: int, minlen: int, maxlen: int) -> int:
    """Number of (i, j) with 0 <= i <= j < T and minlen <= j + 1 - i <= maxlen."""
    lo, hi = max(minlen, 1), min(maxlen, T)
    return sum(T - L + 1 for L in range(lo, hi + 1))


def build_score_matrix(model: WindowScorer, traj: Trajectory | Observations, cfg: SegmenterConfig,
                       start: int = 0, end: Optional[int] = None,
                       bank: Optional[FeatureBank] = None) -> ScoreMatrix:
    """Score every band-feasible window of ``traj`` between ``start`` and ``end``.

    One scorer evaluation per window; ``nfe`` records the count.
    """
    if isinstance(traj, Observations):
        traj = Trajectory("window", traj, np.zeros(len(traj) - 1, dtype=np.int8))
    end = traj.T if end is None else end
    T = end - start
    if T < 1:
        raise ValueError("empty window")
    if T > cfg.window:
        raise ValueError(f"window of {T} transitions exceeds configured size {cfg.window}")
    ii, jj = np.nonzero(band_mask(T, cfg.minlen, cfg.maxlen))
    p = np.full((T, T), np.nan)
    if len(ii):
        bank = bank if bank is not None else FeatureBank()
        p[ii, jj] = model.segment_probs(traj, start + ii, start + jj + 1, bank)
    return ScoreMatrix(p, cfg.minlen, cfg.maxlen, len(ii))


def _log_terms(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(q), np.log1p(-q)


def segment_cost_matrix(scores: ScoreMatrix) -> np.ndarray:
    """``C[s, k]``: log-likelihood of one segment from observation s to boundary k."""
    logp, logq = _log_terms(scores.p)
    logq = np.nan_to_num(logq, nan=0.0)
    T = scores.T
    cum = np.cumsum(logq, axis=1)
    C = np.full((T, T), -np.inf)
    mask = band_mask(T, scores.minlen, scores.maxlen)
    interior = np.zeros((T, T))
    interior[:, 1:] = cum[:, :-1]
    C[mask] = interior[mask] + logp[mask]
    return C


@dataclass
class DPResult:
    value: float
    segmentation: Optional[Segmentation]
    S: np.ndarray = field(repr=False, default=None)
    inner_ops: int = 0
    num_segments: int = 0

    @property
    def feasible(self) -> bool:
        return self.segmentation is not None

    def intervals(self) -> list[tuple[int, int]]:
        if self.segmentation is None:
            raise InfeasibleSegmentation("no feasible segmentation")
        return boundaries_to_segments(self.segmentation)


def dp_segment(scores: ScoreMatrix, T: Optional[int] = None, trajectory_id: str = "") -> DPResult:
    """Best complete segmentation under the band, by dynamic programming.

    ``S[n, k]`` is the best log-likelihood of splitting ``o_0 .. o_{k+1}`` into
    ``n`` segments with the last one ending at boundary ``k`` (row 0 unused).
    Ties prefer fewer segments, then the earliest split point.
    """
    T = scores.T if T is None else T
    if T != scores.T:
        raise ValueError(f"score matrix covers {scores.T} steps, expected {T}")
    C = segment_cost_matrix(scores)
    S = np.full((T + 1, T), -np.inf)
    back = np.full((T + 1, T), -1, dtype=int)
    S[1] = C[0]
    # Cs[l, k] = cost of a segment starting right after boundary l
    Cs = np.full((T, T), -np.inf)
    Cs[: T - 1] = C[1:]
    valid = np.isfinite(Cs)
    per_l = valid.sum(axis=1)
    suffix = np.concatenate([np.cumsum(per_l[::-1])[::-1], [0]])
    ops = 0
    last_n = 1
    for n in range(2, T + 1):
        prev = S[n - 1]
        if not np.isfinite(prev).any():
            break
        ops += int(suffix[n - 2])
        cand = prev[:, None] + Cs
        best_l = np.argmax(cand, axis=0)
        S[n] = cand[best_l, np.arange(T)]
        back[n] = best_l
        last_n = n
    final = S[1 : last_n + 1, T - 1]
    if not np.isfinite(final).any():
        return DPResult(-np.inf, None, S, ops, 0)
    n_best = int(np.argmax(final)) + 1
    ends = [T - 1]
    k = T - 1
    for n in range(n_best, 1, -1):
        k = int(back[n, k])
        ends.append(k)
    alpha = [0] * T
    for e in ends:
        alpha[e] = 1
    return DPResult(float(final[n_best - 1]), Segmentation(trajectory_id, tuple(alpha)), S, ops, n_best)


def evaluate_segmentation(scores: ScoreMatrix, alpha: Sequence[int]) -> float:
    """Log-likelihood of a complete segmentation, term by term; -inf if out of band."""
    logp, logq = _log_terms(scores.p)
    total = 0.0
    for s, e in boundaries_to_segments(alpha):
        length = e - s
        if not scores.minlen <= length <= scores.maxlen:
            return -np.inf
        for t in range(s, e - 1):
            if t + 1 - s >= scores.minlen:
                total += logq[s, t]
        total += logp[s, e - 1]
    return float(total)


def brute_force_segment(scores: ScoreMatrix, T: Optional[int] = None, trajectory_id: str = "") -> DPResult:
    """Enumerate all 2^(T-1) complete segmentations; first maximum wins."""
    T = scores.T if T is None else T
    if T > BRUTE_FORCE_MAX_T:
        raise ValueError(f"brute force limited to T <= {BRUTE_FORCE_MAX_T}, got {T}")
    best_val, best_alpha = -np.inf, None
    for head in itertools.product((0, 1), repeat=T - 1):
        alpha = head + (1,)
        v = evaluate_segmentation(scores, alpha)
        if v > best_val:
            best_val, best_alpha = v, alpha
    if best_alpha is None:
        return DPResult(-np.inf, None)
    return DPResult(best_val, Segmentation(trajectory_id, best_alpha), num_segments=sum(best_alpha))


@dataclass
class SegmentationLog:
    trajectory_id: str
    window_starts: list[int] = field(default_factory=list)
    stalls: list[int] = field(default_factory=list)
    infeasible: list[int] = field(default_factory=list)
    nfe: int = 0
    dp_ops: int = 0

    def to_dict(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "window_starts": self.window_starts,
            "stalls": self.stalls,
            "infeasible": self.infeasible,
            "nfe": self.nfe,
            "dp_ops": self.dp_ops,
        }


def segment_play_trajectory(model: WindowScorer, traj: Trajectory, cfg: SegmenterConfig,
                            bank: Optional[FeatureBank] = None) -> tuple[list[tuple[int, int]], SegmentationLog]:
    """Slide a window over ``traj``, segmenting each window exactly.

    All but the last segment of a window are committed. The last one is
    committed only if its completeness probability exceeds the threshold, in
    which case the next window starts at the current window's end; otherwise
    the next window starts where that last segment began. The window that
    reaches the trajectory end is committed in full.
    """
    bank = bank if bank is not None else FeatureBank()
    run = SegmentationLog(traj.id)
    out: list[tuple[int, int]] = []
    start = 0
    while start < traj.T:
        end = min(start + cfg.window, traj.T)
        run.window_starts.append(start)
        scores = build_score_matrix(model, traj, cfg, start, end, bank)
        run.nfe += scores.nfe
        res = dp_segment(scores, trajectory_id=traj.id)
        run.dp_ops += res.inner_ops
        if not res.feasible:
            run.infeasible.append(start)
            if end == traj.T:
                break
            start += cfg.advance
            continue
        segs = [(start + s, start + e) for s, e in res.intervals()]
        if end == traj.T:
            # the final window is segmented completely
            out.extend(segs)
            break
        out.extend(segs[:-1])
        last_s, last_e = segs[-1]
        if scores.p[last_s - start, last_e - start - 1] > cfg.threshold:
            out.append((last_s, last_e))
            nxt = end
        else:
            nxt = last_s
        if nxt == start:
            run.stalls.append(start)
            log.debug("stall at %s in %s; forcing advance by %d", start, traj.id, cfg.advance)
            nxt = start + cfg.advance
        start = nxt
    return out, run


def label_segments(model: WindowScorer, traj: Trajectory, segments: Sequence[tuple[int, int]],
                   bank: Optional[FeatureBank] = None, method: str = "ps") -> list[LabelledSegment]:
    if not segments:
        return []
    bank = bank if bank is not None else FeatureBank()
    starts, ends = zip(*segments)
    dists = model.label_dists(traj, starts, ends, bank)
    out = []
    for (s, e), d in zip(segments, dists):
        lab = int(np.argmax(d))
        out.append(LabelledSegment(traj.id, s, e, Instruction(lab), float(min(1.0, d[lab])), method))
    return out


class OracleScorer:
    """Ground-truth scorer: high probability exactly on annotated segments.

    ``records`` maps trajectory ids to objects with a ``segments()`` method
    returning :class:`LabelledSegment` lists (e.g. play records).
    """

    def __init__(self, records: dict, p_true: float = 0.99, p_false: float = 0.01, num_labels: int = 18):
        self.p_true, self.p_false = p_true, p_false
        self.num_labels = num_labels
        self._segs = {tid: {(s.start, s.end): s.instruction.label_id for s in rec.segments()}
                      for tid, rec in records.items()}

    def segment_probs(self, traj, starts, ends, bank=None) -> np.ndarray:
        table = self._segs.get(traj.id, {})
        return np.array([self.p_true if (int(s), int(e)) in table else self.p_false
                         for s, e in zip(starts, ends)])

    def label_dists(self, traj, starts, ends, bank=None) -> np.ndarray:
        table = self._segs.get(traj.id, {})
        out = np.full((len(starts), self.num_labels), 1.0 / self.num_labels)
        for r, (s, e) in enumerate(zip(starts, ends)):
            lab = table.get((int(s), int(e)))
            if lab is not None:
                out[r] = 0.0
                out[r, lab] = 1.0
        return out


def segmentation_from_segments(segments: Sequence[tuple[int, int]], T: int, trajectory_id: str = "") -> Segmentation:
    """Boundary vector of a full tiling (thin wrapper for reports)."""
    return segments_to_boundaries(segments, T, trajectory_id)
