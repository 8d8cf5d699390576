"""Experiment configuration: one YAML file, schema-checked on load."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .baselines import CropConfig
from .policy import PolicyConfig
from .scorer import NegativeSamplingConfig, ScorerConfig
from .segmenter import SegmenterConfig
from .synthgym import SPLIT_NAMES, DataConfig, GymConfig

CONDITIONS = (
    "gt-100", "gt-50", "gt-25", "gt-10",
    "gt-relabel", "random-relabel", "ps", "framecrop", "boundarycrop",
)
EXTRACT_METHODS = ("random", "framecrop", "boundarycrop", "ps")


class ConfigError(ValueError):
    pass


@dataclass
class GymSection:
    width: int = 8
    height: int = 8
    num_distractors: int = 7
    num_tasks: int = 10
    done_marker: bool = False


@dataclass
class DataSection:
    seed: int = 0
    n_ann_records: int = 240
    n_unann_records: int = 400
    n_val_records: int = 30
    fractions: list = field(default_factory=lambda: [0.5, 0.25, 0.1])
    gym: GymSection = field(default_factory=GymSection)


@dataclass
class ScorerSection:
    hidden: int = 64
    lr: float = 0.05
    epochs: int = 40
    batch_size: int = 16
    val_fraction: float = 0.2
    seed: int = 0
    t_min: int = 1
    t_max: Optional[int] = None
    negatives_per_form: int = 1


@dataclass
class SegmenterSection:
    window: int = 32
    minlen: Optional[int] = None
    maxlen: Optional[int] = None
    threshold: float = 0.5
    stall_advance: Optional[int] = None


@dataclass
class BaselineSection:
    window: Optional[int] = None
    radius: int = 2
    hidden: int = 64
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    windows_per_segment: int = 4
    val_fraction: float = 0.2
    min_size: Optional[int] = None
    majority: bool = False
    seed: int = 0


@dataclass
class ExtractSection:
    draws_per_trajectory: int = 10
    seed: int = 0
    tolerances: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class AugmentSection:
    start_split: str = "10%"
    target_acc: float = 0.9
    confidence_filter: bool = True
    seed: int = 0
    conditions: list = field(default_factory=lambda: list(CONDITIONS))


@dataclass
class PolicySection:
    hidden: int = 128
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: list(range(8)))
    episodes: int = 512
    horizon: int = 25
    eval_seed: int = 0
    sample: bool = False


@dataclass
class ReportSection:
    figures: bool = True
    dpi: int = 100


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    extract: ExtractSection = field(default_factory=ExtractSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    policy: PolicySection = field(default_factory=PolicySection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    # builders for the module-level configs
    def data_config(self) -> DataConfig:
        d = self.data
        return DataConfig(d.seed, d.n_ann_records, d.n_unann_records, d.n_val_records, tuple(d.fractions),
                          GymConfig(**dataclasses.asdict(d.gym)))

    def scorer_config(self, max_len: int) -> ScorerConfig:
        s = self.scorer
        t_max = s.t_max if s.t_max is not None else NegativeSamplingConfig.from_lengths([max_len]).t_max
        neg = NegativeSamplingConfig(s.t_min, max(s.t_min, t_max), s.negatives_per_form)
        return ScorerConfig(s.hidden, s.lr, s.epochs, s.batch_size, s.val_fraction, s.seed, neg)

    def segmenter_config(self, min_len: int, max_len: int) -> SegmenterConfig:
        s = self.segmenter
        minlen = s.minlen if s.minlen is not None else max(2, min_len)
        maxlen = s.maxlen if s.maxlen is not None else max(max_len, minlen)
        try:
            return SegmenterConfig(s.window, minlen, maxlen, s.threshold, s.stall_advance)
        except ValueError as exc:
            raise ConfigError(f"segmenter: {exc}") from exc

    def crop_config(self, max_len: int, t_max: int, minlen: int) -> CropConfig:
        b = self.baselines
        window = b.window if b.window is not None else max_len + 2 * t_max
        min_size = b.min_size if b.min_size is not None else minlen
        return CropConfig(window, b.radius, b.hidden, b.lr, b.epochs, b.batch_size, b.windows_per_segment,
                          b.val_fraction, min_size, b.majority, b.seed)

    def policy_config(self, seed: int) -> PolicyConfig:
        p = self.policy
        return PolicyConfig(p.hidden, p.lr, p.epochs, p.batch_size, seed)


def _check_type(value: Any, hint, where: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_type(value, args[0], where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    raise ConfigError(f"{where}: unsupported type {hint}")


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _check_type(v, hints[k], f"{where}.{k}" if where else k) for k, v in raw.items()}
    return cls(**kwargs)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    try:
        cfg.data_config()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc
    if cfg.augment.start_split not in SPLIT_NAMES.values():
        raise ConfigError(f"augment.start_split must be one of {sorted(SPLIT_NAMES.values())}")
    if cfg.augment.start_split not in {SPLIT_NAMES.get(f) for f in cfg.data.fractions}:
        raise ConfigError("augment.start_split is not produced by data.fractions")
    bad = [c for c in cfg.augment.conditions if c not in CONDITIONS]
    if bad:
        raise ConfigError(f"augment.conditions: unknown condition(s) {bad}")
    for c in cfg.augment.conditions:
        if c.startswith("gt-") and c[3:].isdigit() and c != "gt-100" and f"{c[3:]}%" not in \
                {SPLIT_NAMES.get(f) for f in cfg.data.fractions}:
            raise ConfigError(f"augment.conditions: {c} needs the matching data fraction")
    if not 0 < cfg.augment.target_acc <= 1:
        raise ConfigError("augment.target_acc must be in (0, 1]")
    if not cfg.policy.seeds or any(isinstance(s, bool) or not isinstance(s, int) for s in cfg.policy.seeds):
        raise ConfigError("policy.seeds must be a non-empty list of integers")
    if len(set(cfg.policy.seeds)) != len(cfg.policy.seeds):
        raise ConfigError("policy.seeds must be distinct")
    if any(not isinstance(t, int) or t < 0 for t in cfg.extract.tolerances):
        raise ConfigError("extract.tolerances must be non-negative integers")
    for name in ("episodes", "horizon", "epochs", "batch_size", "hidden"):
        if getattr(cfg.policy, name) < 1:
            raise ConfigError(f"policy.{name} must be positive")
    if cfg.scorer.epochs < 1 or cfg.scorer.batch_size < 1 or cfg.scorer.hidden < 1:
        raise ConfigError("scorer epochs, batch_size and hidden must be positive")
    if cfg.segmenter.window < 1 or not 0 <= cfg.segmenter.threshold <= 1:
        raise ConfigError("segmenter.window must be positive and threshold in [0, 1]")
    return cfg


def from_dict(raw: Optional[dict]) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw, ""))


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Load and check a YAML config; ``None`` gives the packaged defaults."""
    if path is None:
        return from_dict({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw)


def default_config_text() -> str:
    return resources.files("playseg").joinpath("default_config.yaml").read_text()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
