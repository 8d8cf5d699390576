import numpy as np
import pytest
from scipy import stats

from playseg.core import Instruction, cell_code
from playseg.synthgym import (
    DONE,
    FORWARD,
    LEFT,
    RIGHT,
    DataConfig,
    EnvState,
    GymConfig,
    UnreachableGoal,
    bot_plan,
    bot_policy,
    generate_play_trajectory,
    goal_satisfied,
    label_histogram,
    make_datasets,
    make_splits,
    nested_split,
    random_layout,
    step,
)


def empty_state(w=5, h=5, pos=(2, 2), heading=0, goal=None):
    return EnvState(np.zeros((h, w), dtype=np.int8), pos, heading, goal)


def test_turns_are_inverse_and_cyclic():
    s = empty_state()
    s1, _ = step(step(s, LEFT)[0], RIGHT)
    assert s1.agent_dir == s.agent_dir
    s4 = s
    for _ in range(4):
        s4, _ = step(s4, LEFT)
    assert s4.agent_dir == s.agent_dir and s4.agent_pos == s.agent_pos


def test_forward_blocked_by_wall_and_object():
    s = empty_state(pos=(4, 2), heading=0)
    assert step(s, FORWARD)[0].agent_pos == (4, 2)
    grid = np.zeros((5, 5), dtype=np.int8)
    grid[2, 3] = cell_code(1, 1)
    s = EnvState(grid, (2, 2), 0)
    assert step(s, FORWARD)[0].agent_pos == (2, 2)
    assert step(s, DONE)[0].agent_pos == (2, 2)


def test_bot_done_when_facing_goal():
    grid = np.zeros((5, 5), dtype=np.int8)
    grid[2, 3] = cell_code(2, 3)
    s = EnvState(grid, (2, 2), 0, Instruction.from_object(2, 3))
    assert goal_satisfied(s)
    assert bot_plan(s) == [] and bot_policy(s) is None


def test_bot_corridor_length():
    # 1-high corridor: agent at x=0 facing east, goal at the far end
    w = 7
    grid = np.zeros((1, w), dtype=np.int8)
    grid[0, w - 1] = cell_code(1, 1)
    s = EnvState(grid, (0, 0), 0, Instruction.from_object(1, 1))
    plan = bot_plan(s)
    assert plan == [FORWARD] * (w - 2)
    for a in plan:
        s, _ = step(s, a)
    assert goal_satisfied(s)


def test_bot_unreachable_goal():
    grid = np.zeros((1, 4), dtype=np.int8)
    grid[0, 1] = cell_code(1, 1)  # blocks the corridor
    grid[0, 3] = cell_code(2, 2)
    s = EnvState(grid, (0, 0), 2, Instruction.from_object(2, 2))
    with pytest.raises(UnreachableGoal):
        bot_plan(s)


def test_bot_solves_random_layouts():
    cfg = GymConfig()
    rng = np.random.default_rng(0)
    solved = tried = 0
    while tried < 1000:
        s = random_layout(rng, cfg)
        codes = sorted({int(c) for c in np.unique(s.grid) if c > 0})
        goal = Instruction(codes[int(rng.integers(len(codes)))] - 1)
        s = EnvState(s.grid, s.agent_pos, s.agent_dir, goal)
        try:
            plan = bot_plan(s)
        except UnreachableGoal:
            continue
        tried += 1
        for a in plan:
            s, _ = step(s, a)
        solved += goal_satisfied(s)
    assert solved == tried


def test_single_task_record():
    rec = generate_play_trajectory(5, num_tasks=1)
    assert rec.K == 1
    alpha = rec.gt_boundaries.boundaries
    assert sum(alpha) == 1 and alpha[-1] == 1


def test_generation_deterministic():
    a, b = generate_play_trajectory(9), generate_play_trajectory(9)
    np.testing.assert_array_equal(a.trajectory.actions, b.trajectory.actions)
    np.testing.assert_array_equal(a.trajectory.observations.grids, b.trajectory.observations.grids)
    assert a.gt_boundaries == b.gt_boundaries and a.gt_labels == b.gt_labels


def test_records_have_num_tasks_segments_and_goals_hold():
    for seed in range(100):
        rec = generate_play_trajectory(seed, num_tasks=10)
        assert rec.gt_boundaries.K == 10
        assert all(a != b for a, b in zip(rec.gt_labels, rec.gt_labels[1:]))
        traj = rec.trajectory
        if seed >= 10:
            continue
        # each segment satisfies its instruction exactly at its last frame and not before
        for seg in rec.segments():
            for t in range(seg.start, seg.end + 1):
                o = traj.observations[t]
                st = EnvState(o.grid, o.agent_pos, o.agent_dir, seg.instruction)
                assert goal_satisfied(st) == (t == seg.end)


def test_done_marker_ends_each_task():
    rec = generate_play_trajectory(3, cfg=GymConfig(done_marker=True))
    for seg in rec.segments():
        assert rec.trajectory.actions[seg.end - 1] == DONE


def test_split_sizes_and_nesting():
    order = np.random.default_rng(0).permutation(1000)
    segs = list(range(1000))
    assert len(nested_split(segs, 0.1, order)) == 100
    with pytest.raises(ValueError):
        nested_split(segs, 1.5, order)
    bundle = make_datasets(DataConfig(seed=1, n_ann_records=20, n_unann_records=2, n_val_records=2))
    keys = {tag: {s.key for s in ds.annotated} for tag, ds in bundle.splits.items()}
    assert keys["10%"] <= keys["25%"] <= keys["50%"] <= keys["full"]
    assert len(keys["10%"]) == round(0.1 * len(keys["full"]))
    again = make_splits(bundle.splits["full"], (0.5, 0.25, 0.1), 1)
    assert [s.key for s in again["10%"].annotated] == [s.key for s in bundle.splits["10%"].annotated]


def test_unannotated_pool_is_disjoint_and_gt_kept_apart():
    b = make_datasets(DataConfig(seed=2, n_ann_records=5, n_unann_records=4, n_val_records=3))
    ann_ids = set(b.splits["full"].trajectories)
    un_ids = {t.id for t in b.unannotated.unannotated}
    assert not ann_ids & un_ids and not b.unannotated.annotated
    assert set(b.unann_gt) == un_ids
    assert not ann_ids & set(b.validation.trajectories)


def test_label_balance():
    # within +-20% needs enough segments for sampling noise to stay well below it
    b = make_datasets(DataConfig(seed=0, n_ann_records=600, n_unann_records=1, n_val_records=1))
    hist = label_histogram(b.splits["full"].annotated)
    assert np.all(np.abs(hist / hist.mean() - 1) <= 0.2), hist


def test_default_label_histogram_consistent_with_uniform():
    b = make_datasets(DataConfig(seed=0, n_unann_records=1, n_val_records=1))
    hist = label_histogram(b.splits["full"].annotated)
    assert stats.chisquare(hist).pvalue > 0.001, hist
