"""Comparison extractors: random windows, frame-wise crop and boundary regression.

Frame labels follow the step convention: frame ``t`` of a window belongs to
segment ``(s, e)`` when ``s <= t < e``, so a run of class frames ``a .. b``
crops to the segment ``(a, b + 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .core import NUM_INSTRUCTIONS, Dataset, Instruction, LabelledSegment, Trajectory
from .features import FeatureBank, context_features

BACKGROUND = NUM_INSTRUCTIONS
NUM_CLASSES = NUM_INSTRUCTIONS + 1


@dataclass(frozen=True)
class LengthStats:
    min: int
    max: int

    @classmethod
    def of(cls, d_ann: Dataset) -> "LengthStats":
        lengths = [s.length for s in d_ann.annotated]
        return cls(min(lengths), max(lengths))


def random_segment_extract(stats: LengthStats, traj: Trajectory, labeller, rng: np.random.Generator,
                           bank: Optional[FeatureBank] = None) -> Optional[LabelledSegment]:
    """Uniform length in ``[stats.min, stats.max]``, uniform start, labelled by ``labeller``."""
    if traj.T < stats.min:
        return None
    length = int(rng.integers(stats.min, min(stats.max, traj.T) + 1))
    start = int(rng.integers(0, traj.T - length + 1))
    bank = bank if bank is not None else FeatureBank()
    dist = labeller.label_dists(traj, [start], [start + length], bank)[0]
    lab = int(np.argmax(dist))
    return LabelledSegment(traj.id, start, start + length, Instruction(lab), float(min(1.0, dist[lab])), "random")


@dataclass
class CropConfig:
    window: int = 35
    radius: int = 2
    hidden: int = 64
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    windows_per_segment: int = 4
    val_fraction: float = 0.2
    min_size: int = 1
    majority: bool = False
    seed: int = 0

    @classmethod
    def for_dataset(cls, d_ann: Dataset, t_max: int, **kw) -> "CropConfig":
        """Training window = longest annotated segment + 2 * t_max."""
        return cls(window=LengthStats.of(d_ann).max + 2 * t_max, **kw)


def sample_window_around(seg: LabelledSegment, T: int, window: int, rng: np.random.Generator) -> tuple[int, int]:
    """Window of ``window`` steps containing ``seg``, clipped to the trajectory."""
    if T <= window:
        return 0, T
    lo = max(0, seg.end - window)
    hi = min(seg.start, T - window)
    if hi < lo:
        lo = hi = max(0, min(seg.start, T - window))
    ws = int(rng.integers(lo, hi + 1))
    return ws, ws + window


def _window_frames(bank: FeatureBank, traj: Trajectory, ws: int, we: int, radius: int) -> np.ndarray:
    return context_features(bank.frames(traj)[ws : we + 1], radius)


@dataclass
class _FrameData:
    X: np.ndarray
    y: np.ndarray
    ds: np.ndarray  # steps back to segment start (inside frames)
    de: np.ndarray  # steps forward to segment end
    inside: np.ndarray
    windows: list = field(default_factory=list)  # (traj, ws, we, seg)


def _frame_dataset(segments: Sequence[LabelledSegment], trajs: dict[str, Trajectory], cfg: CropConfig,
                   rng: np.random.Generator, bank: FeatureBank) -> _FrameData:
    X, y, ds, de, inside, windows = [], [], [], [], [], []
    for seg in segments:
        traj = trajs[seg.trajectory_id]
        for _ in range(cfg.windows_per_segment):
            ws, we = sample_window_around(seg, traj.T, cfg.window, rng)
            feats = _window_frames(bank, traj, ws, we, cfg.radius)[:-1]  # frames with a step
            t = np.arange(ws, we)
            ins = (t >= seg.start) & (t < seg.end)
            X.append(feats)
            y.append(np.where(ins, seg.instruction.label_id, BACKGROUND))
            ds.append(t - seg.start)
            de.append(seg.end - t)
            inside.append(ins)
            windows.append((traj, ws, we, seg))
    return _FrameData(np.vstack(X), np.concatenate(y), np.concatenate(ds).astype(float),
                      np.concatenate(de).astype(float), np.concatenate(inside), windows)


def _split(segments, frac, rng):
    order = rng.permutation(len(segments))
    n_val = int(round(frac * len(segments)))
    n_val = n_val if 0 < n_val < len(segments) else 0
    val = [segments[i] for i in sorted(order[:n_val])]
    tr = [segments[i] for i in sorted(order[n_val:])]
    return tr, val


@dataclass
class FrameClassifier:
    """Per-frame softmax over instructions plus a background class."""

    params: nn.Params
    mu: np.ndarray
    sd: np.ndarray
    cfg: CropConfig
    log: nn.TrainLog = field(default_factory=nn.TrainLog)

    kind = "frame_classifier"

    def frame_probs(self, X: np.ndarray) -> np.ndarray:
        h = nn.hidden(self.params, (X - self.mu) / self.sd)
        return nn.softmax(nn.head(self.params, "cls", h))

    def window_probs(self, traj: Trajectory, ws: int, we: int, bank: FeatureBank) -> np.ndarray:
        return self.frame_probs(_window_frames(bank, traj, ws, we, self.cfg.radius)[:-1])


def frame_loss_grad(model, p, X, y):
    Xn = (X - model.mu) / model.sd
    h = nn.hidden(p, Xn)
    logp = nn.log_softmax(nn.head(p, "cls", h))
    n = len(X)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    grads: nn.Params = {}
    dh = nn.head_backward(p, "cls", h, d, grads)
    nn.hidden_backward(p, Xn, h, dh, grads)
    return float(loss), grads


def train_frame_classifier(d_ann: Dataset, cfg: CropConfig, bank: Optional[FeatureBank] = None) -> FrameClassifier:
    if len(d_ann) == 0:
        raise ValueError("empty annotated dataset")
    bank = bank if bank is not None else FeatureBank()
    rng = np.random.default_rng(cfg.seed)
    tr, val = _split(list(d_ann.annotated), cfg.val_fraction, rng)
    data = _frame_dataset(tr, d_ann.trajectories, cfg, rng, bank)
    vdata = _frame_dataset(val, d_ann.trajectories, cfg, rng, bank) if val else data
    mu, sd = nn.fit_normalizer(data.X)
    model = FrameClassifier(nn.init_params(rng, data.X.shape[1], cfg.hidden, {"cls": NUM_CLASSES}), mu, sd, cfg)

    def validate(p):
        saved, model.params = model.params, p
        acc = float((model.frame_probs(vdata.X).argmax(1) == vdata.y).mean())
        model.params = saved
        return acc, {"frame_acc": acc}

    best, log = nn.sgd(model.params, lambda p, idx: frame_loss_grad(model, p, data.X[idx], data.y[idx]),
                       len(data.X), epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, rng=rng,
                       full_loss=lambda p: frame_loss_grad(model, p, data.X, data.y)[0], validate=validate)
    model.params, model.log = best, log
    return model


def crop_frame_labels(labels: Sequence[int], probs: Optional[np.ndarray] = None, min_size: int = 1,
                      majority: bool = False) -> Optional[tuple[int, int, int, float]]:
    """Strip leading/trailing background and accept only a clean single-class run.

    Returns ``(start, end, class, confidence)`` in window coordinates, or None.
    """
    labels = list(labels)
    fg = [i for i, c in enumerate(labels) if c != BACKGROUND]
    if not fg:
        return None
    a, b = fg[0], fg[-1]
    kept = labels[a : b + 1]
    if majority:
        vals, counts = np.unique(kept, return_counts=True)
        cls = int(vals[np.argmax(counts)])
        if cls == BACKGROUND:
            return None
    else:
        if any(c != kept[0] for c in kept):
            return None
        cls = int(kept[0])
    if b + 1 - a < min_size:
        return None
    conf = float(probs[a : b + 1, cls].mean()) if probs is not None else 1.0
    return a, b + 1, cls, conf


def sample_window(traj: Trajectory, window: int, rng: np.random.Generator) -> tuple[int, int]:
    if traj.T <= window:
        return 0, traj.T
    ws = int(rng.integers(0, traj.T - window + 1))
    return ws, ws + window


def framecrop_extract(classifier: FrameClassifier, traj: Trajectory, rng: np.random.Generator,
                      bank: Optional[FeatureBank] = None) -> Optional[LabelledSegment]:
    bank = bank if bank is not None else FeatureBank()
    cfg = classifier.cfg
    ws, we = sample_window(traj, cfg.window, rng)
    probs = classifier.window_probs(traj, ws, we, bank)
    got = crop_frame_labels(probs.argmax(1), probs, cfg.min_size, cfg.majority)
    if got is None:
        return None
    a, b, cls, conf = got
    return LabelledSegment(traj.id, ws + a, ws + b, Instruction(cls), min(1.0, conf), "framecrop")


@dataclass
class BoundaryRegressor:
    """Per-frame anchors predicting class and distances to segment start and end.

    Distances are ``window * softplus(.)`` for the start and
    ``1 + window * softplus(.)`` for the end, so start <= anchor < end.
    """

    params: nn.Params
    mu: np.ndarray
    sd: np.ndarray
    cfg: CropConfig
    log: nn.TrainLog = field(default_factory=nn.TrainLog)

    kind = "boundary_regressor"

    def forward(self, X: np.ndarray, p: Optional[nn.Params] = None):
        p = self.params if p is None else p
        h = nn.hidden(p, (X - self.mu) / self.sd)
        probs = nn.softmax(nn.head(p, "cls", h))
        r = nn.head(p, "reg", h)
        W = float(self.cfg.window)
        return probs, W * np.logaddexp(0.0, r[:, 0]), 1.0 + W * np.logaddexp(0.0, r[:, 1])

    def predict_window(self, traj: Trajectory, ws: int, we: int, bank: FeatureBank):
        """Most confident anchor's ``(start, end, class, confidence)`` in window coordinates."""
        X = _window_frames(bank, traj, ws, we, self.cfg.radius)[:-1]
        probs, ds, de = self.forward(X)
        fg = probs[:, :BACKGROUND]
        t = int(np.argmax(fg.max(axis=1)))
        cls = int(np.argmax(fg[t]))
        n = we - ws
        start = int(np.clip(np.round(t - ds[t]), 0, t))
        end = int(np.clip(np.round(t + de[t]), t + 1, n))
        return start, end, cls, float(fg[t, cls])


def regressor_loss_grad(model: BoundaryRegressor, p, X, y, ds, de, inside):
    Xn = (X - model.mu) / model.sd
    h = nn.hidden(p, Xn)
    n = len(X)
    logp = nn.log_softmax(nn.head(p, "cls", h))
    loss = -logp[np.arange(n), y].mean()
    dcls = np.exp(logp)
    dcls[np.arange(n), y] -= 1.0
    dcls /= n
    r = nn.head(p, "reg", h)
    W = float(model.cfg.window)
    m = inside.astype(float)
    n_in = max(1.0, m.sum())
    # normalised targets: ds / W and (de - 1) / W against softplus outputs
    sp0, sp1 = np.logaddexp(0.0, r[:, 0]), np.logaddexp(0.0, r[:, 1])
    e0 = sp0 - ds / W
    e1 = sp1 - (de - 1.0) / W
    loss += float((m * (e0 ** 2 + e1 ** 2)).sum() / n_in)
    dreg = np.zeros_like(r)
    dreg[:, 0] = m * 2 * e0 * nn.sigmoid(r[:, 0]) / n_in
    dreg[:, 1] = m * 2 * e1 * nn.sigmoid(r[:, 1]) / n_in
    grads: nn.Params = {}
    dh = nn.head_backward(p, "cls", h, dcls, grads)
    dh += nn.head_backward(p, "reg", h, dreg, grads)
    nn.hidden_backward(p, Xn, h, dh, grads)
    return float(loss), grads


def regressor_window_errors(model: BoundaryRegressor, data: _FrameData, bank: FeatureBank) -> dict:
    errs, correct = [], 0
    for traj, ws, we, seg in data.windows:
        s, e, cls, _ = model.predict_window(traj, ws, we, bank)
        errs.append(0.5 * (abs(ws + s - seg.start) + abs(ws + e - seg.end)))
        correct += int(cls == seg.instruction.label_id)
    return {"boundary_mae": float(np.mean(errs)), "class_acc": correct / len(data.windows)}


def train_boundary_regressor(d_ann: Dataset, cfg: CropConfig, bank: Optional[FeatureBank] = None) -> BoundaryRegressor:
    if len(d_ann) == 0:
        raise ValueError("empty annotated dataset")
    bank = bank if bank is not None else FeatureBank()
    rng = np.random.default_rng(cfg.seed + 1)
    tr, val = _split(list(d_ann.annotated), cfg.val_fraction, rng)
    data = _frame_dataset(tr, d_ann.trajectories, cfg, rng, bank)
    vdata = _frame_dataset(val, d_ann.trajectories, cfg, rng, bank) if val else data
    mu, sd = nn.fit_normalizer(data.X)
    model = BoundaryRegressor(
        nn.init_params(rng, data.X.shape[1], cfg.hidden, {"cls": NUM_CLASSES, "reg": 2}), mu, sd, cfg)

    def lg(p, idx):
        return regressor_loss_grad(model, p, data.X[idx], data.y[idx], data.ds[idx], data.de[idx], data.inside[idx])

    def validate(p):
        saved, model.params = model.params, p
        info = regressor_window_errors(model, vdata, bank)
        model.params = saved
        return info["class_acc"] - info["boundary_mae"] / cfg.window, info

    best, log = nn.sgd(model.params, lg, len(data.X), epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       rng=rng, full_loss=lambda p: lg(p, np.arange(len(data.X)))[0], validate=validate)
    model.params, model.log = best, log
    return model


def boundarycrop_extract(regressor: BoundaryRegressor, traj: Trajectory, rng: np.random.Generator,
                         bank: Optional[FeatureBank] = None) -> Optional[LabelledSegment]:
    bank = bank if bank is not None else FeatureBank()
    ws, we = sample_window(traj, regressor.cfg.window, rng)
    s, e, cls, conf = regressor.predict_window(traj, ws, we, bank)
    if e - s < regressor.cfg.min_size:
        return None
    return LabelledSegment(traj.id, ws + s, ws + e, Instruction(cls), min(1.0, conf), "boundarycrop")
