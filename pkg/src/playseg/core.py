"""Domain types and segmentation algebra shared by every other module.

Index convention used throughout the package:

* a trajectory of length ``T`` has observations ``o_0 .. o_T`` and actions
  ``a_0 .. a_{T-1}``;
* a segment ``(t0, t1)`` covers observations ``o_{t0} .. o_{t1}`` and the
  actions ``a_{t0} .. a_{t1-1}``; its length is ``t1 - t0`` transitions;
* a boundary vector ``alpha`` has length ``T`` and ``alpha[i] == 1`` means a
  segment ends at observation ``i + 1``, so segment ``(t0, t1)`` sets
  ``alpha[t1 - 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

OBJECT_TYPES = ("key", "ball", "box")
COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
NUM_INSTRUCTIONS = len(OBJECT_TYPES) * len(COLORS)

# headings: 0 east, 1 south, 2 west, 3 north (x grows east, y grows south)
DIR_VECTORS = ((1, 0), (0, 1), (-1, 0), (0, -1))

START = -1
"""Sentinel returned by :func:`last_boundary_before` when no boundary exists."""


class SegmentationError(ValueError):
    """Raised for malformed boundary vectors or interval lists."""


@dataclass(frozen=True, order=True)
class Instruction:
    label_id: int

    def __post_init__(self):
        if not 0 <= self.label_id < NUM_INSTRUCTIONS:
            raise ValueError(f"label_id {self.label_id} outside [0, {NUM_INSTRUCTIONS})")

    @classmethod
    def from_object(cls, obj_type: int, color: int) -> "Instruction":
        """Instruction for an object code pair (type in 1..3, color in 1..6)."""
        return cls((obj_type - 1) * len(COLORS) + (color - 1))

    @property
    def obj_type(self) -> int:
        return self.label_id // len(COLORS) + 1

    @property
    def color(self) -> int:
        return self.label_id % len(COLORS) + 1

    @property
    def text(self) -> str:
        return f"go to the {COLORS[self.color - 1]} {OBJECT_TYPES[self.obj_type - 1]}"


def cell_code(obj_type: int, color: int) -> int:
    """Integer code of an occupied cell; 0 is reserved for empty cells."""
    return (obj_type - 1) * len(COLORS) + color


def decode_cell(code: int) -> tuple[int, int]:
    if code <= 0:
        raise ValueError("empty cell has no object")
    return (code - 1) // len(COLORS) + 1, (code - 1) % len(COLORS) + 1


@dataclass(frozen=True)
class Observation:
    """One symbolic frame. ``grid[y, x]`` holds a cell code (0 = empty)."""

    grid: np.ndarray
    agent_pos: tuple[int, int]
    agent_dir: int

    def __post_init__(self):
        h, w = self.grid.shape
        x, y = self.agent_pos
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"agent position {self.agent_pos} outside {w}x{h} grid")
        if self.agent_dir not in (0, 1, 2, 3):
            raise ValueError(f"bad heading {self.agent_dir}")

    def front_cell(self) -> tuple[int, int]:
        dx, dy = DIR_VECTORS[self.agent_dir]
        return self.agent_pos[0] + dx, self.agent_pos[1] + dy


@dataclass(frozen=True)
class Observations:
    """A run of frames stored column-wise.

    ``grids`` is ``(n, H, W)``, ``poses`` is ``(n, 2)`` as ``(x, y)`` and
    ``dirs`` is ``(n,)``. Slicing returns views, never copies.
    """

    grids: np.ndarray
    poses: np.ndarray
    dirs: np.ndarray

    def __post_init__(self):
        n = len(self.grids)
        if len(self.poses) != n or len(self.dirs) != n:
            raise ValueError("grids, poses and dirs must have equal length")

    def __len__(self) -> int:
        return len(self.grids)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Observations(self.grids[idx], self.poses[idx], self.dirs[idx])
        x, y = self.poses[idx]
        return Observation(self.grids[idx], (int(x), int(y)), int(self.dirs[idx]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def stack(cls, frames: Sequence[Observation]) -> "Observations":
        return cls(
            np.stack([f.grid for f in frames]).astype(np.int8),
            np.array([f.agent_pos for f in frames], dtype=np.int16).reshape(-1, 2),
            np.array([f.agent_dir for f in frames], dtype=np.int8),
        )


@dataclass(frozen=True)
class Trajectory:
    id: str
    observations: Observations
    actions: np.ndarray

    def __post_init__(self):
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError(
                f"trajectory {self.id}: {len(self.observations)} observations "
                f"for {len(self.actions)} actions"
            )
        if len(self.actions) < 1:
            raise ValueError(f"trajectory {self.id} has no transitions")

    @property
    def T(self) -> int:
        return len(self.actions)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.observations.grids.shape[1:])


@dataclass(frozen=True)
class Segmentation:
    trajectory_id: str
    boundaries: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.boundaries):
            raise SegmentationError("boundaries must be binary")

    @property
    def T(self) -> int:
        return len(self.boundaries)

    @property
    def K(self) -> int:
        return sum(self.boundaries)

    @property
    def complete(self) -> bool:
        return self.T > 0 and self.boundaries[-1] == 1

    def ends(self) -> list[int]:
        """Boundary indices ``i`` with ``alpha[i] == 1``."""
        return [i for i, b in enumerate(self.boundaries) if b]


@dataclass(frozen=True)
class LabelledSegment:
    trajectory_id: str
    start: int
    end: int
    instruction: Instruction
    confidence: float = 1.0
    method: str = "gt"

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad segment bounds ({self.start}, {self.end})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.trajectory_id, self.start, self.end)


@dataclass
class Dataset:
    """Annotated segments plus the trajectories they point into.

    ``trajectories`` maps ids to parent trajectories of annotated segments;
    ``unannotated`` holds play trajectories without labels.
    """

    annotated: list[LabelledSegment] = field(default_factory=list)
    trajectories: dict[str, Trajectory] = field(default_factory=dict)
    unannotated: list[Trajectory] = field(default_factory=list)
    split_tag: str = "full"

    SPLIT_TAGS = ("full", "50%", "25%", "10%", "validation", "unannotated", "augmented")

    def __post_init__(self):
        if self.split_tag not in self.SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    def validate(self, min_length: int = 1) -> None:
        for seg in self.annotated:
            traj = self.trajectories.get(seg.trajectory_id)
            if traj is None:
                raise ValueError(f"segment references unknown trajectory {seg.trajectory_id}")
            if seg.end > traj.T:
                raise ValueError(f"segment {seg.key} exceeds trajectory length {traj.T}")
            if seg.length < min_length:
                raise ValueError(f"segment {seg.key} shorter than {min_length}")

    def __len__(self) -> int:
        return len(self.annotated)

    def window(self, seg: LabelledSegment) -> Observations:
        return slice_segment(self.trajectories[seg.trajectory_id], seg.start, seg.end)


def boundaries_to_segments(seg: Segmentation | Sequence[int]) -> list[tuple[int, int]]:
    alpha = seg.boundaries if isinstance(seg, Segmentation) else tuple(seg)
    if len(alpha) == 0 or alpha[-1] != 1:
        raise SegmentationError("incomplete segmentation: the final boundary flag must be 1")
    out = []
    start = 0
    for i, b in enumerate(alpha):
        if b == 1:
            out.append((start, i + 1))
            start = i + 1
        elif b != 0:
            raise SegmentationError(f"non-binary boundary flag {b!r} at {i}")
    return out


def segments_to_boundaries(
    intervals: Iterable[tuple[int, int]], T: int, trajectory_id: str = ""
) -> Segmentation:
    alpha = [0] * T
    cursor = 0
    for s, e in intervals:
        if s != cursor:
            raise SegmentationError(f"interval ({s}, {e}) does not start at {cursor}")
        if e <= s:
            raise SegmentationError(f"empty interval ({s}, {e})")
        if e > T:
            raise SegmentationError(f"interval ({s}, {e}) exceeds T={T}")
        alpha[e - 1] = 1
        cursor = e
    if cursor != T:
        raise SegmentationError(f"intervals cover [0, {cursor}] instead of [0, {T}]")
    return Segmentation(trajectory_id, tuple(alpha))


def last_boundary_before(alpha: Sequence[int], t: int) -> int:
    """Largest ``i <= t`` with ``alpha[i] == 1``, or :data:`START`.

    The current segment then begins at observation ``i + 1`` (``0`` for START).
    """
    if not 0 <= t < len(alpha):
        raise IndexError(f"t={t} outside [0, {len(alpha)})")
    for i in range(t, -1, -1):
        if alpha[i] == 1:
            return i
    return START


def slice_segment(traj: Trajectory, t0: int, t1: int) -> Observations:
    if not 0 <= t0 < t1 <= traj.T:
        raise IndexError(f"segment ({t0}, {t1}) outside trajectory of length {traj.T}")
    return traj.observations[t0 : t1 + 1]
