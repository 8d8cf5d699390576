"""Two-headed segment scorer: completeness probability and instruction label.

Both heads sit on one shared tanh layer over segment features. The
completeness head learns from annotated segments (positives) and from
shifted/grown/shrunk copies of them (negatives); the label head learns from
positives only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .core import NUM_INSTRUCTIONS, Dataset, LabelledSegment, Observations, Trajectory
from .features import FeatureBank, extract_segment_features, schema_hash, segment_dim

NEGATIVE_FORMS = ("right_grow", "right_shrink", "left_grow", "both_grow", "translate_right", "translate_left")


@dataclass(frozen=True)
class NegativeSamplingConfig:
    t_min: int = 1
    t_max: int = 5
    per_form: int = 1

    def __post_init__(self):
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if self.per_form < 1:
            raise ValueError("per_form must be >= 1")

    @classmethod
    def from_lengths(cls, lengths: Sequence[int], per_form: int = 1) -> "NegativeSamplingConfig":
        """t_min = 1 and t_max = ceil(max length / 2)."""
        return cls(1, max(1, math.ceil(max(lengths) / 2)), per_form)


def negative_windows(t0: int, t1: int, ks: Sequence[int]) -> list[tuple[str, int, int]]:
    """The six unclipped negative forms for shift amounts ``ks = (k1, .., k6)``."""
    k1, k2, k3, k4, k5, k6 = ks
    return [
        ("right_grow", t0, t1 + k1),
        ("right_shrink", t0, t1 - k1),
        ("left_grow", t0 - k2, t1),
        ("both_grow", t0 - k3, t1 + k4),
        ("translate_right", t0 + k5, t1 + k5),
        ("translate_left", t0 - k6, t1 - k6),
    ]


def generate_negatives(segment: LabelledSegment, cfg: NegativeSamplingConfig, rng: np.random.Generator,
                       traj_len: int) -> list[tuple[int, int]]:
    """Negative windows ``(start, end)`` for one annotated segment, clipped to ``[0, traj_len]``."""
    t0, t1 = segment.start, segment.end
    seen = set()
    out = []
    for _ in range(cfg.per_form):
        ks = rng.integers(cfg.t_min, cfg.t_max + 1, size=6)
        for _, s, e in negative_windows(t0, t1, ks):
            s, e = max(0, s), min(traj_len, e)
            if e - s < 1 or (s, e) == (t0, t1) or (s, e) in seen:
                continue
            seen.add((s, e))
            out.append((s, e))
    return out


@dataclass
class ScorerConfig:
    hidden: int = 64
    lr: float = 0.05
    epochs: int = 40
    batch_size: int = 16
    val_fraction: float = 0.2
    seed: int = 0
    negatives: Optional[NegativeSamplingConfig] = None


@dataclass
class ScorerModel:
    params: nn.Params
    mu: np.ndarray
    sd: np.ndarray
    width: int
    height: int
    log: nn.TrainLog = field(default_factory=nn.TrainLog)
    negatives: Optional[NegativeSamplingConfig] = None

    kind = "scorer"

    @property
    def schema(self) -> str:
        return schema_hash(self.width, self.height)

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, height: int, hidden: int = 64) -> "ScorerModel":
        dim = segment_dim(width, height)
        p = nn.init_params(rng, dim, hidden, {"seg": 1, "lm": NUM_INSTRUCTIONS})
        return cls(p, np.zeros(dim), np.ones(dim), width, height)

    def _hidden(self, X: np.ndarray, p: Optional[nn.Params] = None) -> tuple[np.ndarray, np.ndarray]:
        p = self.params if p is None else p
        Xn = (X - self.mu) / self.sd
        return Xn, nn.hidden(p, Xn)

    def seg_probs_from_features(self, X: np.ndarray) -> np.ndarray:
        _, h = self._hidden(np.atleast_2d(X))
        return nn.sigmoid(nn.head(self.params, "seg", h)[:, 0])

    def label_dists_from_features(self, X: np.ndarray) -> np.ndarray:
        _, h = self._hidden(np.atleast_2d(X))
        return nn.softmax(nn.head(self.params, "lm", h))

    def _check_window(self, observations: Observations) -> None:
        if observations.grids.shape[1:] != (self.height, self.width):
            raise ValueError("observation grid does not match the model's feature schema")

    def predict_seg_prob(self, observations: Observations) -> float:
        self._check_window(observations)
        return float(self.seg_probs_from_features(extract_segment_features(observations))[0])

    def predict_label_dist(self, observations: Observations) -> np.ndarray:
        self._check_window(observations)
        return self.label_dists_from_features(extract_segment_features(observations))[0]

    # batched window scoring used by the segmenter and extractors
    def segment_probs(self, traj: Trajectory, starts, ends, bank: FeatureBank) -> np.ndarray:
        return self.seg_probs_from_features(bank.segments(traj, starts, ends))

    def label_dists(self, traj: Trajectory, starts, ends, bank: FeatureBank) -> np.ndarray:
        return self.label_dists_from_features(bank.segments(traj, starts, ends))


def loss_and_grad(model: ScorerModel, p: nn.Params, Xpos: np.ndarray, labels: np.ndarray,
                  Xneg: np.ndarray) -> tuple[float, nn.Params]:
    """Negated training objective and its gradient.

    ``E_pos[-log p_lm(label) - log p_seg(1)] + E_neg[-log p_seg(0)]``; the
    negative term is dropped when there are no negatives.
    """
    n_pos, n_neg = len(Xpos), len(Xneg)
    if n_pos == 0:
        raise ValueError("loss needs at least one positive sample")
    X = np.vstack([Xpos, Xneg]) if n_neg else Xpos
    Xn, h = model._hidden(X, p)
    z = nn.head(p, "seg", h)[:, 0]
    logits = nn.head(p, "lm", h[:n_pos])
    logp = nn.log_softmax(logits)
    loss = -logp[np.arange(n_pos), labels].mean() - nn.log_sigmoid(z[:n_pos]).mean()
    dz = np.empty_like(z)
    dz[:n_pos] = (nn.sigmoid(z[:n_pos]) - 1.0) / n_pos
    if n_neg:
        loss += -nn.log_sigmoid(-z[n_pos:]).mean()
        dz[n_pos:] = nn.sigmoid(z[n_pos:]) / n_neg
    dlogits = np.exp(logp)
    dlogits[np.arange(n_pos), labels] -= 1.0
    dlogits /= n_pos
    grads: nn.Params = {}
    dh = nn.head_backward(p, "seg", h, dz[:, None], grads)
    dh_lm = nn.head_backward(p, "lm", h[:n_pos], dlogits, grads)
    dh[:n_pos] += dh_lm
    nn.hidden_backward(p, Xn, h, dh, grads)
    return float(loss), grads


def loss(model: ScorerModel, Xpos: np.ndarray, labels: np.ndarray, Xneg: np.ndarray) -> float:
    return loss_and_grad(model, model.params, Xpos, labels, Xneg)[0]


@dataclass
class TrainingSet:
    """Feature matrices for positives and their negatives."""

    Xpos: np.ndarray
    labels: np.ndarray
    Xneg: np.ndarray
    neg_owner: np.ndarray  # index of the positive each negative came from


def build_training_set(segments: Sequence[LabelledSegment], trajectories: dict[str, Trajectory],
                       neg_cfg: NegativeSamplingConfig, rng: np.random.Generator,
                       bank: FeatureBank) -> TrainingSet:
    pos_rows, neg_rows, owners = [], [], []
    for i, seg in enumerate(segments):
        traj = trajectories[seg.trajectory_id]
        pos_rows.append(bank.segments(traj, [seg.start], [seg.end])[0])
        negs = generate_negatives(seg, neg_cfg, rng, traj.T)
        if negs:
            s, e = zip(*negs)
            neg_rows.append(bank.segments(traj, s, e))
            owners.extend([i] * len(negs))
    dim = len(pos_rows[0])
    Xneg = np.vstack(neg_rows) if neg_rows else np.zeros((0, dim))
    return TrainingSet(np.array(pos_rows), np.array([s.instruction.label_id for s in segments]),
                       Xneg, np.array(owners, dtype=int))


def evaluate(model: ScorerModel, data: TrainingSet) -> dict:
    lab = model.label_dists_from_features(data.Xpos).argmax(axis=1)
    pp = model.seg_probs_from_features(data.Xpos)
    pn = model.seg_probs_from_features(data.Xneg) if len(data.Xneg) else np.zeros(0)
    correct = (pp > 0.5).sum() + (pn <= 0.5).sum()
    tpr = float((pp > 0.5).mean())
    tnr = float((pn <= 0.5).mean()) if len(pn) else 1.0
    return {
        "label_acc": float((lab == data.labels).mean()),
        "seg_acc": float(correct / (len(pp) + len(pn))),
        "seg_balanced_acc": 0.5 * (tpr + tnr),
    }


def train(d_ann: Dataset, cfg: ScorerConfig = ScorerConfig(), bank: Optional[FeatureBank] = None) -> ScorerModel:
    if len(d_ann) == 0:
        raise ValueError("cannot train a scorer on an empty annotated dataset")
    if not 0.0 < cfg.val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    bank = bank or FeatureBank()
    rng = np.random.default_rng(cfg.seed)
    neg_cfg = cfg.negatives or NegativeSamplingConfig.from_lengths([s.length for s in d_ann.annotated])
    segs = list(d_ann.annotated)
    order = rng.permutation(len(segs))
    n_val = max(1, int(round(cfg.val_fraction * len(segs))))
    if n_val >= len(segs):
        n_val = 0
    val_segs = [segs[i] for i in sorted(order[:n_val])]
    tr_segs = [segs[i] for i in sorted(order[n_val:])]
    train_set = build_training_set(tr_segs, d_ann.trajectories, neg_cfg, rng, bank)
    val_set = build_training_set(val_segs, d_ann.trajectories, neg_cfg, rng, bank) if val_segs else None

    width, height = next(iter(d_ann.trajectories.values())).grid_shape[::-1]
    model = ScorerModel.init(rng, width, height, cfg.hidden)
    model.negatives = neg_cfg
    model.mu, model.sd = nn.fit_normalizer(np.vstack([train_set.Xpos, train_set.Xneg]))

    neg_by_owner = [np.flatnonzero(train_set.neg_owner == i) for i in range(len(train_set.Xpos))]

    def batch_loss_grad(p, idx):
        neg_idx = np.concatenate([neg_by_owner[i] for i in idx]) if len(idx) else np.zeros(0, int)
        return loss_and_grad(model, p, train_set.Xpos[idx], train_set.labels[idx], train_set.Xneg[neg_idx])

    def full_loss(p):
        return loss_and_grad(model, p, train_set.Xpos, train_set.labels, train_set.Xneg)[0]

    def validate(p):
        saved = model.params
        model.params = p
        info = evaluate(model, val_set if val_set is not None else train_set)
        model.params = saved
        return info["label_acc"] + info["seg_balanced_acc"], info

    best, log = nn.sgd(model.params, batch_loss_grad, len(train_set.Xpos), epochs=cfg.epochs,
                       batch_size=cfg.batch_size, lr=cfg.lr, rng=rng, full_loss=full_loss,
                       validate=validate)
    model.params = best
    model.log = log
    return model
