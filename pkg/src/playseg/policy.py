"""Behaviour-cloned instruction-following policy and online evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import nn
from .core import NUM_INSTRUCTIONS, Dataset, Instruction, Observations
from .features import NPI, FeatureBank, frame_features, schema_hash
from .synthgym import (
    ACTIONS,
    EnvState,
    GymConfig,
    UnreachableGoal,
    bot_plan,
    goal_satisfied,
    present_instructions,
    random_layout,
    step,
)

NUM_ACTIONS = len(ACTIONS)


def policy_inputs(frames: np.ndarray, labels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Egocentric frame features, instruction one-hot and the instruction's own goal block.

    Absolute pose one-hots are dropped; they let the policy memorise layouts.

    The goal block copies the per-instruction entries of the
    instructed label out of the frame vector (a fixed FiLM-style gate).
    """
    n = len(frames)
    onehot = np.zeros((n, NUM_INSTRUCTIONS))
    onehot[np.arange(n), labels] = 1.0
    base = width + height + 4
    cols = base + NPI * labels[:, None] + np.arange(NPI)[None, :]
    goal = frames[np.arange(n)[:, None], cols]
    return np.hstack([frames[:, base:], onehot, goal])


@dataclass
class PolicyConfig:
    hidden: int = 128
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0


@dataclass
class PolicyModel:
    params: nn.Params
    mu: np.ndarray
    sd: np.ndarray
    width: int
    height: int
    log: nn.TrainLog = field(default_factory=nn.TrainLog)

    kind = "policy"

    @property
    def schema(self) -> str:
        return schema_hash(self.width, self.height)

    def inputs(self, frames: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return policy_inputs(frames, labels, self.width, self.height)

    def action_probs(self, frames: np.ndarray, labels: np.ndarray, p: Optional[nn.Params] = None) -> np.ndarray:
        p = self.params if p is None else p
        h = nn.hidden(p, (self.inputs(frames, labels) - self.mu) / self.sd)
        return nn.softmax(nn.head(p, "act", h))

    def act(self, states: Sequence[EnvState], rng: Optional[np.random.Generator] = None,
            sample: bool = False) -> np.ndarray:
        frames = frame_features(Observations.stack([s.observation() for s in states]))
        labels = np.array([s.goal.label_id for s in states])
        probs = self.action_probs(frames, labels)
        if not sample:
            return probs.argmax(axis=1)
        rng = rng if rng is not None else np.random.default_rng(0)
        return np.array([rng.choice(NUM_ACTIONS, p=row) for row in probs])


class BotPolicy:
    """The scripted solver exposed through the policy interface."""

    def act(self, states, rng=None, sample=False):
        return np.array([bot_plan(s)[0] for s in states])


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, states, rng=None, sample=False):
        return self.rng.integers(0, NUM_ACTIONS, size=len(states))


def bc_samples(dataset: Dataset, bank: Optional[FeatureBank] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One (frame features, instruction, action) triple per step of every segment."""
    bank = bank if bank is not None else FeatureBank()
    F, L, A = [], [], []
    for seg in dataset.annotated:
        traj = dataset.trajectories[seg.trajectory_id]
        F.append(bank.frames(traj)[seg.start : seg.end])
        L.append(np.full(seg.length, seg.instruction.label_id))
        A.append(traj.actions[seg.start : seg.end].astype(int))
    return np.vstack(F), np.concatenate(L), np.concatenate(A)


def bc_loss_grad(model: PolicyModel, p: nn.Params, X: np.ndarray, actions: np.ndarray) -> tuple[float, nn.Params]:
    """Mean cross-entropy of the expert actions given standardized inputs ``X``."""
    Xn = (X - model.mu) / model.sd
    h = nn.hidden(p, Xn)
    logp = nn.log_softmax(nn.head(p, "act", h))
    n = len(X)
    loss = -logp[np.arange(n), actions].mean()
    d = np.exp(logp)
    d[np.arange(n), actions] -= 1.0
    d /= n
    grads: nn.Params = {}
    dh = nn.head_backward(p, "act", h, d, grads)
    nn.hidden_backward(p, Xn, h, dh, grads)
    return float(loss), grads


def train_bc(dataset: Dataset, cfg: PolicyConfig = PolicyConfig(), bank: Optional[FeatureBank] = None) -> PolicyModel:
    if len(dataset) == 0:
        raise ValueError("cannot clone behaviour from an empty dataset")
    frames, labels, actions = bc_samples(dataset, bank)
    rng = np.random.default_rng(cfg.seed)
    width, height = next(iter(dataset.trajectories.values())).grid_shape[::-1]
    X = policy_inputs(frames, labels, width, height)
    mu, sd = nn.fit_normalizer(X)
    params = nn.init_params(rng, X.shape[1], cfg.hidden, {"act": NUM_ACTIONS})
    model = PolicyModel(params, mu, sd, width, height)
    best, log = nn.sgd(
        model.params,
        lambda p, idx: bc_loss_grad(model, p, X[idx], actions[idx]),
        len(X), epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, rng=rng,
        full_loss=lambda p: bc_loss_grad(model, p, X, actions)[0],
    )
    model.params, model.log = best, log
    return model


@dataclass
class EvalResult:
    success: float
    per_task: dict[int, float]
    counts: dict[int, int]
    episodes: int

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "episodes": self.episodes,
            "per_task": {str(k): v for k, v in sorted(self.per_task.items())},
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
        }


def eval_episodes(seed: int, episodes: int, gym: GymConfig) -> list[EnvState]:
    """Fresh layouts with a reachable goal that is not already satisfied."""
    rng = np.random.default_rng([seed, 17])
    out = []
    while len(out) < episodes:
        state = random_layout(rng, gym)
        goals = present_instructions(state.grid)
        goal = goals[int(rng.integers(len(goals)))]
        state = EnvState(state.grid, state.agent_pos, state.agent_dir, goal)
        try:
            if not bot_plan(state):
                continue
        except UnreachableGoal:
            continue
        out.append(state)
    return out


def evaluate_policy(policy, episodes: int = 512, horizon: int = 25, seed: int = 0,
                    gym: GymConfig = GymConfig(), sample: bool = False) -> EvalResult:
    """Fraction of episodes whose goal is reached within ``horizon`` steps."""
    states = eval_episodes(seed, episodes, gym)
    goals = [s.goal.label_id for s in states]
    solved = np.zeros(len(states), dtype=bool)
    rng = np.random.default_rng([seed, 23])
    active = list(range(len(states)))
    for _ in range(horizon):
        if not active:
            break
        actions = policy.act([states[i] for i in active], rng=rng, sample=sample)
        still = []
        for i, a in zip(active, actions):
            states[i], _ = step(states[i], int(a))
            if goal_satisfied(states[i]):
                solved[i] = True
            else:
                still.append(i)
        active = still
    per_task, counts = {}, {}
    for lab in sorted(set(goals)):
        mask = np.array(goals) == lab
        per_task[lab] = float(solved[mask].mean())
        counts[lab] = int(mask.sum())
    return EvalResult(float(solved.mean()), per_task, counts, len(states))


@dataclass
class ImprovementTable:
    rows: list[dict]
    spearman: Optional[float]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "spearman": self.spearman}


def per_task_improvement(base: EvalResult, aug: EvalResult, added_counts: dict[int, int]) -> ImprovementTable:
    """Per-task gain relative to the headroom ``1 - acc_base`` and its rank correlation with added samples."""
    if set(base.per_task) != set(aug.per_task):
        raise ValueError("evaluations cover different task sets")
    rows = []
    for lab in sorted(base.per_task):
        b, a = base.per_task[lab], aug.per_task[lab]
        gain = 0.0 if b >= 1.0 else (a - b) / (1.0 - b)
        rows.append({"label_id": lab, "instruction": Instruction(lab).text, "base": b, "augmented": a,
                     "improvement": gain, "added": int(added_counts.get(lab, 0))})
    gains = [r["improvement"] for r in rows]
    added = [r["added"] for r in rows]
    rho = None
    if len(rows) > 1 and len(set(gains)) > 1 and len(set(added)) > 1:
        rho = float(stats.spearmanr(added, gains).statistic)
    return ImprovementTable(rows, rho)


def random_action_baseline(episodes: int = 512, horizon: int = 25, seed: int = 0, gym: GymConfig = GymConfig()):
    return evaluate_policy(RandomPolicy(seed), episodes, horizon, seed, gym)


def bot_baseline(episodes: int = 512, horizon: int = 25, seed: int = 0, gym: GymConfig = GymConfig()):
    return evaluate_policy(BotPolicy(), episodes, horizon, seed, gym)
