"""Model checkpoints: an ``.npz`` weight archive plus a JSON metadata file.

The archive is written with fixed zip timestamps so identical weights give
identical bytes. Loading refuses a checkpoint whose feature schema differs
from the one the caller expects.
"""
from __future__ import annotations

import dataclasses
import io
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .baselines import BoundaryRegressor, CropConfig, FrameClassifier
from .features import schema_hash
from .io import read_json, write_json
from .policy import PolicyModel
from .scorer import NegativeSamplingConfig, ScorerModel

CHECKPOINT_VERSION = 1
_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def _log_dict(log: nn.TrainLog) -> dict:
    val = [{k: float(v) for k, v in row.items()} for row in log.val]
    return {"losses": [float(x) for x in log.losses], "val": val, "best_epoch": int(log.best_epoch)}


def save_model(path: Path, model, width: Optional[int] = None, height: Optional[int] = None,
               extra: Optional[dict] = None) -> Path:
    """Write ``<path>.npz`` and ``<path>.json``; returns the metadata path.

    ``extra`` is stored verbatim in the metadata (JSON-serialisable values).
    """
    path = Path(path)
    width = getattr(model, "width", width)
    height = getattr(model, "height", height)
    if width is None or height is None:
        raise CheckpointError("grid size needed to record the feature schema")
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["mu"], arrays["sd"] = model.mu, model.sd
    _write_npz(path.with_suffix(".npz"), arrays)
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "schema": schema_hash(width, height),
        "width": width,
        "height": height,
        "log": _log_dict(model.log),
    }
    if isinstance(model, ScorerModel) and model.negatives is not None:
        meta["negatives"] = dataclasses.asdict(model.negatives)
    if isinstance(model, (FrameClassifier, BoundaryRegressor)):
        meta["crop"] = dataclasses.asdict(model.cfg)
    if extra:
        meta["extra"] = extra
    write_json(path.with_suffix(".json"), meta)
    return path.with_suffix(".json")


def read_meta(path: Path) -> dict:
    path = Path(path).with_suffix(".json")
    if not path.exists():
        raise CheckpointError(f"checkpoint metadata {path} not found")
    return read_json(path)


def load_model(path: Path, expected_kind: Optional[str] = None, expected_schema: Optional[str] = None):
    path = Path(path)
    if not path.with_suffix(".json").exists() or not path.with_suffix(".npz").exists():
        raise CheckpointError(f"checkpoint {path} is incomplete")
    meta = read_json(path.with_suffix(".json"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if expected_kind is not None and meta["kind"] != expected_kind:
        raise CheckpointError(f"expected a {expected_kind} checkpoint, found {meta['kind']}")
    if expected_schema is not None and meta["schema"] != expected_schema:
        raise CheckpointError(f"feature schema mismatch: checkpoint {meta['schema']}, expected {expected_schema}")
    if meta["schema"] != schema_hash(meta["width"], meta["height"]):
        raise CheckpointError("checkpoint was written with a different feature schema version")
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    log = nn.TrainLog(meta["log"]["losses"], meta["log"]["val"], meta["log"]["best_epoch"])
    kind, w, h = meta["kind"], meta["width"], meta["height"]
    if kind == "scorer":
        neg = NegativeSamplingConfig(**meta["negatives"]) if "negatives" in meta else None
        return ScorerModel(params, arrays["mu"], arrays["sd"], w, h, log, neg)
    if kind == "policy":
        return PolicyModel(params, arrays["mu"], arrays["sd"], w, h, log)
    if kind == "frame_classifier":
        return FrameClassifier(params, arrays["mu"], arrays["sd"], CropConfig(**meta["crop"]), log)
    if kind == "boundary_regressor":
        return BoundaryRegressor(params, arrays["mu"], arrays["sd"], CropConfig(**meta["crop"]), log)
    raise CheckpointError(f"unknown model kind {kind!r}")
