"""On-disk dataset format: canonical JSON lines plus a manifest.

A dataset directory holds ``trajectories.jsonl`` (one trajectory per line),
``annotations.jsonl`` (one labelled segment per line) and ``manifest.json``.
Unannotated play data may carry a ``gt_segments.jsonl`` sidecar that is only
read by evaluation code. All files are written with sorted keys and fixed
separators so equal content gives equal bytes.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Dataset, Instruction, LabelledSegment, Observations, Trajectory
from .features import schema_hash

FORMAT_VERSION = 1


class DataFormatError(ValueError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    out = []
    try:
        with open(path) as fh:
            for i, line in enumerate(fh):
                if line.strip():
                    out.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    return out


def trajectory_to_row(traj: Trajectory) -> dict:
    """Grids are stored once per distinct layout and indexed per frame."""
    grids, index, seen = [], [], {}
    for g in traj.observations.grids:
        key = g.tobytes()
        if key not in seen:
            seen[key] = len(grids)
            grids.append(g.ravel().tolist())
        index.append(seen[key])
    h, w = traj.grid_shape
    return {
        "id": traj.id,
        "width": w,
        "height": h,
        "actions": traj.actions.astype(int).tolist(),
        "grids": grids,
        "grid_index": index,
        "poses": traj.observations.poses.astype(int).tolist(),
        "dirs": traj.observations.dirs.astype(int).tolist(),
    }


def trajectory_from_row(row: dict) -> Trajectory:
    try:
        w, h = int(row["width"]), int(row["height"])
        layouts = np.array(row["grids"], dtype=np.int8).reshape(-1, h, w)
        grids = layouts[np.asarray(row["grid_index"], dtype=int)]
        obs = Observations(grids, np.asarray(row["poses"], dtype=np.int16).reshape(-1, 2),
                           np.asarray(row["dirs"], dtype=np.int8))
        return Trajectory(str(row["id"]), obs, np.asarray(row["actions"], dtype=np.int8))
    except (KeyError, ValueError, IndexError) as exc:
        raise DataFormatError(f"malformed trajectory record: {exc}") from exc


def segment_to_row(seg: LabelledSegment) -> dict:
    return {
        "trajectory_id": seg.trajectory_id,
        "t0": seg.start,
        "t1": seg.end,
        "label_id": seg.instruction.label_id,
        "confidence": seg.confidence,
        "method": seg.method,
    }


def segment_from_row(row: dict) -> LabelledSegment:
    try:
        return LabelledSegment(str(row["trajectory_id"]), int(row["t0"]), int(row["t1"]),
                               Instruction(int(row["label_id"])), float(row.get("confidence", 1.0)),
                               str(row.get("method", "gt")))
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"malformed annotation record: {exc}") from exc


def length_stats(segments: Sequence[LabelledSegment]) -> Optional[dict]:
    if not segments:
        return None
    lengths = [s.length for s in segments]
    return {"min": min(lengths), "max": max(lengths), "mean": round(float(np.mean(lengths)), 6)}


def save_dataset(path: Path, dataset: Dataset, *, seed: Optional[int] = None, done_marker: bool = False,
                 gt_segments: Optional[Sequence[LabelledSegment]] = None, extra: Optional[dict] = None) -> None:
    """Write ``dataset`` to directory ``path``; trajectories are sorted by id."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    trajs = dict(dataset.trajectories)
    for t in dataset.unannotated:
        trajs[t.id] = t
    ordered = [trajs[k] for k in sorted(trajs)]
    write_jsonl(path / "trajectories.jsonl", (trajectory_to_row(t) for t in ordered))
    write_jsonl(path / "annotations.jsonl", (segment_to_row(s) for s in dataset.annotated))
    if gt_segments is not None:
        write_jsonl(path / "gt_segments.jsonl", (segment_to_row(s) for s in gt_segments))
    h, w = ordered[0].grid_shape if ordered else (0, 0)
    manifest = {
        "format_version": FORMAT_VERSION,
        "split_tag": dataset.split_tag,
        "grid": {"width": w, "height": h},
        "feature_schema": schema_hash(w, h) if ordered else None,
        "num_instructions": 18,
        "num_trajectories": len(ordered),
        "num_segments": len(dataset.annotated),
        "unannotated_ids": sorted(t.id for t in dataset.unannotated),
        "seed": seed,
        "done_marker": done_marker,
        "segment_lengths": length_stats(dataset.annotated),
    }
    if extra:
        manifest.update(extra)
    write_json(path / "manifest.json", manifest)


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {manifest.get('format_version')}")
    trajs = {t.id: t for t in map(trajectory_from_row, read_jsonl(path / "trajectories.jsonl"))}
    unann_ids = set(manifest.get("unannotated_ids", []))
    segs = [segment_from_row(r) for r in read_jsonl(path / "annotations.jsonl")]
    ds = Dataset(
        segs,
        {k: v for k, v in trajs.items() if k not in unann_ids},
        [trajs[k] for k in sorted(unann_ids)],
        split_tag=manifest["split_tag"],
    )
    try:
        ds.validate()
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return ds


def load_gt_segments(path: Path) -> list[LabelledSegment]:
    p = Path(path) / "gt_segments.jsonl"
    if not p.exists():
        raise DataFormatError(f"{path}: no ground-truth sidecar")
    return [segment_from_row(r) for r in read_jsonl(p)]
