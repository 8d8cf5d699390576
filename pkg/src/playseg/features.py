"""Symbolic frame features and fixed-size segment summaries."""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .core import DIR_VECTORS, NUM_INSTRUCTIONS, Observations, Trajectory

FEATURE_VERSION = 3
LENGTH_SCALE = 32.0
PER_INSTRUCTION = ("present", "facing", "forward", "right", "distance")
NPI = len(PER_INSTRUCTION)
VIEW_RADIUS = 2
VIEW_CELLS = (2 * VIEW_RADIUS + 1) ** 2


def frame_dim(width: int, height: int) -> int:
    return width + height + 4 + NUM_INSTRUCTIONS * len(PER_INSTRUCTION) + 4 + VIEW_CELLS


def segment_dim(width: int, height: int) -> int:
    return 3 * frame_dim(width, height) + 1


def schema_hash(width: int, height: int) -> str:
    schema = {
        "version": FEATURE_VERSION,
        "width": width,
        "height": height,
        "instructions": NUM_INSTRUCTIONS,
        "per_instruction": PER_INSTRUCTION,
        "length_scale": LENGTH_SCALE,
        "view_radius": VIEW_RADIUS,
        "segment_summary": ("first", "last", "mean", "length"),
    }
    return hashlib.sha256(json.dumps(schema, sort_keys=True).encode()).hexdigest()[:16]


def _blocked(grid: np.ndarray, x: int, y: int) -> float:
    h, w = grid.shape
    return 1.0 if not (0 <= x < w and 0 <= y < h) or grid[y, x] != 0 else 0.0


def frame_features(obs: Observations) -> np.ndarray:
    """``(n, frame_dim)`` matrix, one row per frame.

    Layout: x one-hot, y one-hot, heading one-hot, then per instruction
    (canonical label order) presence, facing flag and the egocentric
    forward/right offset and Manhattan distance to the nearest matching
    object, then blocked flags
    for the front/left/right cells, an any-object-in-front flag and an
    egocentric occupancy patch (objects and out-of-grid cells count as
    occupied), rows running from ahead to behind and columns left to right.
    """
    view = np.arange(-VIEW_RADIUS, VIEW_RADIUS + 1)
    n, h, w = obs.grids.shape
    scale = float(max(w, h))
    out = np.zeros((n, frame_dim(w, h)))
    base = w + h + 4
    last_grid = None
    for t in range(n):
        grid = obs.grids[t]
        x, y = int(obs.poses[t, 0]), int(obs.poses[t, 1])
        d = int(obs.dirs[t])
        row = out[t]
        row[x] = 1.0
        row[w + y] = 1.0
        row[w + h + d] = 1.0
        if grid is not last_grid:
            ys, xs = np.nonzero(grid)  # row-major: canonical cell order
            codes = grid[ys, xs].astype(int)
            last_grid = grid
        fx, fy = DIR_VECTORS[d]
        rx, ry = DIR_VECTORS[(d + 1) % 4]
        dx, dy = xs - x, ys - y
        dist = np.abs(dx) + np.abs(dy)
        best = {}
        for k in range(len(codes)):
            lab = codes[k] - 1
            if lab not in best or dist[k] < dist[best[lab]]:
                best[lab] = k
        for lab, k in best.items():
            off = base + NPI * lab
            row[off] = 1.0
            row[off + 1] = 1.0 if dx[k] == fx and dy[k] == fy else 0.0
            row[off + 2] = (dx[k] * fx + dy[k] * fy) / scale
            row[off + 3] = (dx[k] * rx + dy[k] * ry) / scale
            row[off + 4] = dist[k] / scale
        tail = base + NPI * NUM_INSTRUCTIONS
        lx, ly = DIR_VECTORS[(d - 1) % 4]
        row[tail] = _blocked(grid, x + fx, y + fy)
        row[tail + 1] = _blocked(grid, x + lx, y + ly)
        row[tail + 2] = _blocked(grid, x + rx, y + ry)
        front = (x + fx, y + fy)
        row[tail + 3] = 1.0 if 0 <= front[0] < w and 0 <= front[1] < h and grid[front[1], front[0]] else 0.0
        # cell at (ahead a, right r) is pos + a * fwd + r * right
        ahead = view[::-1][:, None]
        px = x + ahead * fx + view[None, :] * rx
        py = y + ahead * fy + view[None, :] * ry
        inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        occ = np.ones(px.shape)
        occ[inside] = grid[py[inside], px[inside]] != 0
        row[tail + 4 :] = occ.ravel()
    return out


def extract_segment_features(observations: Observations) -> np.ndarray:
    if len(observations) < 2:
        raise ValueError("a segment window needs at least two observations")
    return segment_features_from_frames(frame_features(observations))


def segment_features_from_frames(frames: np.ndarray) -> np.ndarray:
    """First frame, last frame, mean frame and scaled length."""
    length = (len(frames) - 1) / LENGTH_SCALE
    return np.concatenate([frames[0], frames[-1], frames.mean(axis=0), [length]])


class FeatureBank:
    """Per-trajectory cache of frame features with batched window summaries."""

    def __init__(self):
        self._frames: dict[str, np.ndarray] = {}
        self._cumsum: dict[str, np.ndarray] = {}

    def frames(self, traj: Trajectory) -> np.ndarray:
        f = self._frames.get(traj.id)
        if f is None:
            f = frame_features(traj.observations)
            self._frames[traj.id] = f
        return f

    def _cs(self, traj: Trajectory) -> np.ndarray:
        cs = self._cumsum.get(traj.id)
        if cs is None:
            f = self.frames(traj)
            cs = np.vstack([np.zeros((1, f.shape[1])), np.cumsum(f, axis=0)])
            self._cumsum[traj.id] = cs
        return cs

    def segments(self, traj: Trajectory, starts, ends) -> np.ndarray:
        """Segment features for windows ``(starts[i], ends[i])`` of ``traj``."""
        starts = np.asarray(starts, dtype=int)
        ends = np.asarray(ends, dtype=int)
        if np.any(ends - starts < 1) or np.any(starts < 0) or np.any(ends > traj.T):
            raise ValueError("segment windows must satisfy 0 <= start < end <= T")
        f = self.frames(traj)
        cs = self._cs(traj)
        mean = (cs[ends + 1] - cs[starts]) / (ends - starts + 1)[:, None]
        length = ((ends - starts) / LENGTH_SCALE)[:, None]
        return np.hstack([f[starts], f[ends], mean, length])


def context_features(frames: np.ndarray, radius: int = 2) -> np.ndarray:
    """Stack each frame with its ``radius`` neighbours on both sides (edge-padded)."""
    n = len(frames)
    idx = np.clip(np.arange(n)[:, None] + np.arange(-radius, radius + 1)[None, :], 0, n - 1)
    return frames[idx].reshape(n, -1)
