"""Deterministic GoTo grid-world, a BFS solver bot and play-data generation."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    DIR_VECTORS,
    NUM_INSTRUCTIONS,
    Dataset,
    Instruction,
    LabelledSegment,
    Observation,
    Observations,
    Segmentation,
    Trajectory,
    cell_code,
)

LEFT, RIGHT, FORWARD, DONE = 0, 1, 2, 3
ACTIONS = (LEFT, RIGHT, FORWARD, DONE)
ACTION_NAMES = ("left", "right", "forward", "done")


class UnreachableGoal(RuntimeError):
    pass


@dataclass(frozen=True)
class GymConfig:
    width: int = 8
    height: int = 8
    num_distractors: int = 7
    num_tasks: int = 10
    done_marker: bool = False
    max_layout_attempts: int = 100

    def __post_init__(self):
        cells = self.width * self.height
        if self.width < 2 or self.height < 1:
            raise ValueError("grid too small")
        if self.num_distractors + 2 > cells:
            raise ValueError("too many objects for the grid")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")


@dataclass(frozen=True)
class EnvState:
    grid: np.ndarray
    agent_pos: tuple[int, int]
    agent_dir: int
    goal: Optional[Instruction] = None

    def observation(self) -> Observation:
        return Observation(self.grid, self.agent_pos, self.agent_dir)


@dataclass(frozen=True)
class PlayRecord:
    trajectory: Trajectory
    gt_boundaries: Segmentation
    gt_labels: tuple[Instruction, ...]

    @property
    def K(self) -> int:
        return len(self.gt_labels)

    def segments(self) -> list[LabelledSegment]:
        out = []
        start = 0
        for end_idx, label in zip(self.gt_boundaries.ends(), self.gt_labels):
            out.append(LabelledSegment(self.trajectory.id, start, end_idx + 1, label))
            start = end_idx + 1
        return out


def _in_bounds(grid: np.ndarray, x: int, y: int) -> bool:
    return 0 <= x < grid.shape[1] and 0 <= y < grid.shape[0]


def facing_code(grid: np.ndarray, pos: tuple[int, int], heading: int) -> int:
    dx, dy = DIR_VECTORS[heading]
    x, y = pos[0] + dx, pos[1] + dy
    if not _in_bounds(grid, x, y):
        return 0
    return int(grid[y, x])


def goal_satisfied(state: EnvState, goal: Optional[Instruction] = None) -> bool:
    goal = goal if goal is not None else state.goal
    if goal is None:
        return False
    return facing_code(state.grid, state.agent_pos, state.agent_dir) == cell_code(goal.obj_type, goal.color)


def _transition(grid: np.ndarray, pos: tuple[int, int], heading: int, action: int):
    if action == LEFT:
        return pos, (heading - 1) % 4
    if action == RIGHT:
        return pos, (heading + 1) % 4
    if action == FORWARD:
        dx, dy = DIR_VECTORS[heading]
        x, y = pos[0] + dx, pos[1] + dy
        if _in_bounds(grid, x, y) and grid[y, x] == 0:
            return (x, y), heading
        return pos, heading
    if action == DONE:
        return pos, heading
    raise ValueError(f"unknown action {action}")


def step(state: EnvState, action: int) -> tuple[EnvState, Observation]:
    pos, heading = _transition(state.grid, state.agent_pos, state.agent_dir, action)
    new = EnvState(state.grid, pos, heading, state.goal)
    return new, new.observation()


def bot_plan(state: EnvState, goal: Optional[Instruction] = None) -> list[int]:
    """Shortest action sequence that leaves the agent facing a goal object.

    BFS over (x, y, heading); successors expanded in action order so ties
    resolve towards left, then right, then forward.
    """
    goal = goal if goal is not None else state.goal
    if goal is None:
        raise ValueError("no goal set")
    target = cell_code(goal.obj_type, goal.color)
    grid = state.grid
    start = (state.agent_pos, state.agent_dir)
    if facing_code(grid, *start) == target:
        return []
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for action in (LEFT, RIGHT, FORWARD):
            nxt = _transition(grid, node[0], node[1], action)
            if nxt in parent:
                continue
            parent[nxt] = (node, action)
            if facing_code(grid, *nxt) == target:
                plan = []
                cur = nxt
                while parent[cur] is not None:
                    cur, a = parent[cur]
                    plan.append(a)
                return plan[::-1]
            queue.append(nxt)
    raise UnreachableGoal(f"{goal.text} unreachable from {state.agent_pos}")


def bot_policy(state: EnvState) -> Optional[int]:
    """Next bot action, or None when the current task is already complete."""
    plan = bot_plan(state)
    return plan[0] if plan else None


def random_layout(rng: np.random.Generator, cfg: GymConfig) -> EnvState:
    """Objects at distinct cells, agent on a free cell with a random heading."""
    n_cells = cfg.width * cfg.height
    n_obj = cfg.num_distractors + 1
    cells = rng.choice(n_cells, size=n_obj + 1, replace=False)
    grid = np.zeros((cfg.height, cfg.width), dtype=np.int8)
    for c in cells[:n_obj]:
        y, x = divmod(int(c), cfg.width)
        grid[y, x] = cell_code(int(rng.integers(1, 4)), int(rng.integers(1, 7)))
    ay, ax = divmod(int(cells[n_obj]), cfg.width)
    return EnvState(grid, (ax, ay), int(rng.integers(0, 4)))


def present_instructions(grid: np.ndarray) -> list[Instruction]:
    codes = sorted({int(c) for c in np.unique(grid) if c > 0})
    return [Instruction(c - 1) for c in codes]


def _candidate_goals(state: EnvState, exclude: Optional[Instruction]) -> list[tuple[Instruction, list[int]]]:
    out = []
    for instr in present_instructions(state.grid):
        if instr == exclude:
            continue
        try:
            plan = bot_plan(state, instr)
        except UnreachableGoal:
            continue
        if plan:
            out.append((instr, plan))
    return out


def generate_play_trajectory(seed: int, num_tasks: Optional[int] = None,
                             cfg: GymConfig = GymConfig(), traj_id: Optional[str] = None) -> PlayRecord:
    """Chain bot rollouts on one layout, sampling a fresh goal after each success."""
    num_tasks = cfg.num_tasks if num_tasks is None else num_tasks
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    rng = np.random.default_rng(seed)
    traj_id = traj_id if traj_id is not None else f"play-{seed}"
    for _ in range(cfg.max_layout_attempts):
        record = _try_rollout(rng, num_tasks, cfg, traj_id)
        if record is not None:
            return record
    raise UnreachableGoal(f"seed {seed}: no solvable layout after {cfg.max_layout_attempts} attempts")


def _try_rollout(rng, num_tasks, cfg, traj_id) -> Optional[PlayRecord]:
    state = random_layout(rng, cfg)
    frames = [state.observation()]
    actions: list[int] = []
    ends: list[int] = []
    labels: list[Instruction] = []
    prev = None
    for _ in range(num_tasks):
        candidates = _candidate_goals(state, prev)
        if not candidates:
            return None
        goal, plan = candidates[int(rng.integers(len(candidates)))]
        state = EnvState(state.grid, state.agent_pos, state.agent_dir, goal)
        if cfg.done_marker:
            plan = plan + [DONE]
        for a in plan:
            state, obs = step(state, a)
            actions.append(a)
            frames.append(obs)
        ends.append(len(actions) - 1)
        labels.append(goal)
        prev = goal
    T = len(actions)
    traj = Trajectory(traj_id, Observations.stack(frames), np.array(actions, dtype=np.int8))
    alpha = [0] * T
    for e in ends:
        alpha[e] = 1
    return PlayRecord(traj, Segmentation(traj_id, tuple(alpha)), tuple(labels))


def record_seeds(seed: int, n: int, stream: int) -> list[int]:
    """Independent per-record seeds for one named stream of a dataset build."""
    ss = np.random.SeedSequence([seed, stream])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_ann_records: int = 240
    n_unann_records: int = 400
    n_val_records: int = 30
    fractions: tuple[float, ...] = (0.5, 0.25, 0.1)
    gym: GymConfig = field(default_factory=GymConfig)


@dataclass
class DataBundle:
    """Everything :func:`make_datasets` produces."""

    splits: dict[str, Dataset]
    validation: Dataset
    unannotated: Dataset
    unann_gt: dict[str, PlayRecord]
    ann_records: dict[str, PlayRecord]


SPLIT_NAMES = {0.5: "50%", 0.25: "25%", 0.1: "10%"}


def nested_split(segments: list[LabelledSegment], fraction: float, order: np.ndarray) -> list[LabelledSegment]:
    n = len(segments)
    k = int(round(fraction * n))
    if not 0 < fraction <= 1 or k > n:
        raise ValueError(f"split fraction {fraction} invalid for {n} segments")
    idx = sorted(order[:k].tolist())
    return [segments[i] for i in idx]


def make_splits(full: Dataset, fractions, seed: int) -> dict[str, Dataset]:
    """The full set plus nested subsets; smaller fractions are prefixes of one permutation."""
    segments = list(full.annotated)
    order = np.random.default_rng([seed, 4]).permutation(len(segments))
    splits = {"full": Dataset(segments, full.trajectories, split_tag="full")}
    for frac in sorted(fractions, reverse=True):
        tag = SPLIT_NAMES.get(frac)
        if tag is None:
            raise ValueError(f"unsupported split fraction {frac}")
        splits[tag] = Dataset(nested_split(segments, frac, order), full.trajectories, split_tag=tag)
    return splits


def make_datasets(cfg: DataConfig) -> DataBundle:
    gym = cfg.gym
    ann = [generate_play_trajectory(s, cfg=gym, traj_id=f"ann-{i:04d}")
           for i, s in enumerate(record_seeds(cfg.seed, cfg.n_ann_records, 1))]
    val = [generate_play_trajectory(s, cfg=gym, traj_id=f"val-{i:04d}")
           for i, s in enumerate(record_seeds(cfg.seed, cfg.n_val_records, 2))]
    unann = [generate_play_trajectory(s, cfg=gym, traj_id=f"play-{i:04d}")
             for i, s in enumerate(record_seeds(cfg.seed, cfg.n_unann_records, 3))]

    full = Dataset([seg for rec in ann for seg in rec.segments()],
                   {rec.trajectory.id: rec.trajectory for rec in ann}, split_tag="full")
    splits = make_splits(full, cfg.fractions, cfg.seed)

    validation = Dataset([s for rec in val for s in rec.segments()],
                         {rec.trajectory.id: rec.trajectory for rec in val}, split_tag="validation")
    unannotated = Dataset(unannotated=[rec.trajectory for rec in unann], split_tag="unannotated")
    return DataBundle(
        splits=splits,
        validation=validation,
        unannotated=unannotated,
        unann_gt={rec.trajectory.id: rec for rec in unann},
        ann_records={rec.trajectory.id: rec for rec in ann},
    )


def label_histogram(segments) -> np.ndarray:
    hist = np.zeros(NUM_INSTRUCTIONS, dtype=int)
    for s in segments:
        hist[s.instruction.label_id] += 1
    return hist
