import numpy as np
import pytest
from conftest import dataset_of

from playseg import nn
from playseg.core import Dataset
from playseg.policy import (
    NUM_ACTIONS,
    EvalResult,
    PolicyConfig,
    PolicyModel,
    bc_loss_grad,
    bc_samples,
    bot_baseline,
    evaluate_policy,
    per_task_improvement,
    policy_inputs,
    random_action_baseline,
    train_bc,
)
from playseg.synthgym import GymConfig


def _model_and_data(records, seed=0, hidden=8):
    frames, labels, actions = bc_samples(dataset_of(records[:2]))
    h, w = records[0].trajectory.grid_shape
    X = policy_inputs(frames, labels, w, h)
    mu, sd = nn.fit_normalizer(X)
    rng = np.random.default_rng(seed)
    params = nn.init_params(rng, X.shape[1], hidden, {"act": NUM_ACTIONS})
    return PolicyModel(params, mu, sd, w, h), X, actions, rng


@pytest.mark.parametrize("seed", [0, 1])
def test_bc_gradient_finite_difference(records, seed):
    model, X, actions, rng = _model_and_data(records, seed)
    _, grad = bc_loss_grad(model, model.params, X, actions)
    errs = nn.finite_difference_check(lambda p: bc_loss_grad(model, p, X, actions)[0], grad, model.params, rng, 20)
    assert max(errs) <= 1e-5


def test_uniform_policy_loss(records):
    model, X, actions, _ = _model_and_data(records)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    loss, _ = bc_loss_grad(model, model.params, X, actions)
    assert loss == pytest.approx(np.log(NUM_ACTIONS))


def test_bc_samples_align(records):
    ds = dataset_of(records[:3])
    frames, labels, actions = bc_samples(ds)
    n = sum(s.length for s in ds.annotated)
    assert len(frames) == len(labels) == len(actions) == n
    s = ds.annotated[0]
    np.testing.assert_array_equal(actions[: s.length], ds.trajectories[s.trajectory_id].actions[s.start : s.end])
    assert set(labels[: s.length]) == {s.instruction.label_id}


def test_single_segment_is_memorised(records):
    seg = records[0].segments()[0]
    ds = Dataset([seg], {seg.trajectory_id: records[0].trajectory})
    model = train_bc(ds, PolicyConfig(hidden=32, epochs=150, batch_size=8, lr=0.3))
    frames, labels, actions = bc_samples(ds)
    assert (model.action_probs(frames, labels).argmax(1) == actions).all()


def test_train_empty_rejected():
    with pytest.raises(ValueError):
        train_bc(Dataset())


def test_train_deterministic(records):
    ds = dataset_of(records[:3])
    cfg = PolicyConfig(hidden=16, epochs=3)
    a, b = train_bc(ds, cfg), train_bc(ds, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_bot_solves_everything():
    res = bot_baseline(episodes=128)
    assert res.success == 1.0
    assert sum(res.counts.values()) == 128


def test_random_policy_is_weak():
    res = random_action_baseline(episodes=256)
    assert 0.0 < res.success <= 0.2


def test_evaluation_deterministic(records):
    model = train_bc(dataset_of(records), PolicyConfig(hidden=16, epochs=3))
    a = evaluate_policy(model, episodes=64, seed=5)
    b = evaluate_policy(model, episodes=64, seed=5)
    assert a.to_dict() == b.to_dict()
    assert a.success == pytest.approx(sum(a.per_task[k] * a.counts[k] for k in a.counts) / 64)


def test_per_task_improvement_conventions():
    base = EvalResult(0.5, {0: 0.5, 1: 1.0, 2: 0.2}, {0: 2, 1: 2, 2: 5}, 9)
    aug = EvalResult(0.7, {0: 0.75, 1: 1.0, 2: 0.6}, {0: 2, 1: 2, 2: 5}, 9)
    table = per_task_improvement(base, aug, {0: 3, 2: 10})
    rows = {r["label_id"]: r for r in table.rows}
    assert rows[0]["improvement"] == pytest.approx(0.5)
    assert rows[1]["improvement"] == 0.0
    assert rows[2]["improvement"] == pytest.approx(0.5)
    assert rows[1]["added"] == 0
    with pytest.raises(ValueError):
        per_task_improvement(base, EvalResult(0.5, {0: 0.5}, {0: 1}, 1), {})


def test_eval_gym_override():
    res = bot_baseline(episodes=32, gym=GymConfig(width=6, height=6, num_distractors=2))
    assert res.success == 1.0
