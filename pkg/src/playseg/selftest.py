"""Quick internal consistency checks run by ``playseg selftest``.

The exact DP is compared with exhaustive enumeration, analytic gradients with
central differences, and the windowed segmenter with a ground-truth scorer.
Each check returns ``(name, passed, detail)``.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import scorer as scorer_mod
from .core import Dataset
from .features import FeatureBank
from .policy import NUM_ACTIONS, PolicyModel, bc_loss_grad, bc_samples, policy_inputs
from .scorer import NegativeSamplingConfig, ScorerModel, build_training_set
from .segmenter import (
    OracleScorer,
    ScoreMatrix,
    SegmenterConfig,
    brute_force_segment,
    dp_segment,
    evaluate_segmentation,
    segment_play_trajectory,
)
from .synthgym import GymConfig, generate_play_trajectory


def check_dp(cases: int = 50, seed: int = 0) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        T = int(rng.integers(1, 11))
        lo = int(rng.integers(1, T + 1))
        hi = int(rng.integers(lo, T + 1))
        scores = ScoreMatrix.from_array(rng.uniform(0.001, 0.999, (T, T)), lo, hi)
        dp, bf = dp_segment(scores), brute_force_segment(scores)
        if dp.feasible != bf.feasible:
            return "dp-vs-brute-force", False, f"feasibility differs at T={T}, band [{lo}, {hi}]"
        if dp.feasible:
            worst = max(worst, abs(dp.value - bf.value),
                        abs(evaluate_segmentation(scores, dp.segmentation.boundaries) - bf.value))
    return "dp-vs-brute-force", worst <= 1e-9, f"{cases} matrices, max abs error {worst:.2e}"


def check_oracle(records: int = 5, seed: int = 0) -> tuple[str, bool, str]:
    gym = GymConfig()
    recs = [generate_play_trajectory(seed * 1000 + i, cfg=gym, traj_id=f"self-{i}") for i in range(records)]
    oracle = OracleScorer({r.trajectory.id: r for r in recs})
    lens = [s.length for r in recs for s in r.segments()]
    cfg = SegmenterConfig(window=max(32, max(lens)), minlen=min(lens), maxlen=max(lens))
    exact = 0
    for r in recs:
        segs, _ = segment_play_trajectory(oracle, r.trajectory, cfg)
        exact += segs == [(s.start, s.end) for s in r.segments()]
    return "oracle-segmentation", exact == records, f"{exact}/{records} trajectories recovered exactly"


def _toy_dataset(records: int, seed: int) -> Dataset:
    recs = [generate_play_trajectory(seed * 1000 + i, traj_id=f"grad-{i}") for i in range(records)]
    segs = [s for r in recs for s in r.segments()]
    return Dataset(segs, {r.trajectory.id: r.trajectory for r in recs})


def check_scorer_gradient(probes: int = 20, seed: int = 0) -> tuple[str, bool, str]:
    ds = _toy_dataset(2, seed)
    bank = FeatureBank()
    w, h = GymConfig().width, GymConfig().height
    rng = np.random.default_rng(seed)
    model = ScorerModel.init(rng, w, h, hidden=8)
    neg = NegativeSamplingConfig.from_lengths([s.length for s in ds.annotated])
    data = build_training_set(ds.annotated, ds.trajectories, neg, rng, bank)
    model.mu, model.sd = nn.fit_normalizer(np.vstack([data.Xpos, data.Xneg]))
    _, grad = scorer_mod.loss_and_grad(model, model.params, data.Xpos, data.labels, data.Xneg)
    errs = nn.finite_difference_check(
        lambda p: scorer_mod.loss_and_grad(model, p, data.Xpos, data.labels, data.Xneg)[0],
        grad, model.params, rng, probes)
    return "scorer-gradient", bool(max(errs) <= 1e-5), f"{probes} probes, max relative error {max(errs):.2e}"


def check_policy_gradient(probes: int = 20, seed: int = 0) -> tuple[str, bool, str]:
    ds = _toy_dataset(1, seed)
    frames, labels, actions = bc_samples(ds)
    w, h = GymConfig().width, GymConfig().height
    X = policy_inputs(frames, labels, w, h)
    rng = np.random.default_rng(seed)
    mu, sd = nn.fit_normalizer(X)
    params = nn.init_params(rng, X.shape[1], 8, {"act": NUM_ACTIONS})
    model = PolicyModel(params, mu, sd, w, h)
    _, grad = bc_loss_grad(model, params, X, actions)
    errs = nn.finite_difference_check(lambda p: bc_loss_grad(model, p, X, actions)[0], grad, params, rng, probes)
    return "policy-gradient", bool(max(errs) <= 1e-5), f"{probes} probes, max relative error {max(errs):.2e}"


def run_selftest(cases: int = 50) -> list[tuple[str, bool, str]]:
    return [check_dp(cases), check_oracle(), check_scorer_gradient(), check_policy_gradient()]

