"""Content-addressed, resumable experiment stages.

Each stage writes into ``<run>/stages/<name>-<key>/`` where ``key`` hashes
the code version, the config entries the stage reads and the keys of its
upstream stages. A directory containing ``stage.json`` is complete and is
reused as is; stages are built in a temporary directory and renamed on
success, so an interrupted run leaves nothing half-written behind.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import multiprocessing
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import scorer as scorer_mod
from .augment import (
    BoundaryCropExtractor,
    FrameCropExtractor,
    PSExtractor,
    RandomExtractor,
    confidence_threshold_from_validation,
    dataset_stats,
    relabel,
    run_augmentation,
)
from .baselines import LengthStats, train_boundary_regressor, train_frame_classifier
from .checkpoint import load_model, save_model
from .config import EXTRACT_METHODS, ExperimentConfig, dump_config
from .core import Dataset, LabelledSegment, Trajectory
from .features import FeatureBank
from .io import (
    load_dataset,
    load_gt_segments,
    read_json,
    read_jsonl,
    save_dataset,
    segment_from_row,
    segment_to_row,
    write_json,
    write_jsonl,
)
from .metrics import BoundaryCounts, LabelScore, boundary_points, f1, iou
from .policy import BotPolicy, RandomPolicy, evaluate_policy, train_bc
from .segmenter import label_segments, segment_play_trajectory
from .synthgym import label_histogram, make_datasets, make_splits

log = logging.getLogger("playseg")

STAGE_ORDER = (
    "generate", "split", "train-scorer", "train-baselines",
    "extract-random", "extract-framecrop", "extract-boundarycrop", "extract-ps",
    "augment", "train-policy", "eval-policy", "report",
)
GT_CONDITIONS = {"gt-100": "full", "gt-50": "50%", "gt-25": "25%", "gt-10": "10%"}


class MissingArtifact(RuntimeError):
    """An upstream stage has not been run for the current config."""


def _tag_file(tag: str) -> str:
    return tag.replace("%", "pct")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclasses.dataclass(frozen=True)
class StageSpec:
    name: str
    upstream: tuple[str, ...]
    config: Callable[[ExperimentConfig], dict]
    run: Callable[["Pipeline", Path], None]


def _pick(cfg: ExperimentConfig, *paths: str) -> dict:
    d = cfg.to_dict()
    out = {}
    for path in paths:
        node = d
        for part in path.split("."):
            node = node[part]
        out[path] = node
    return out


# ---------------------------------------------------------------- pipeline


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, run_dir: Path, workers: int = 1):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.workers = max(1, int(workers))
        self.bank = FeatureBank()
        self._keys: dict[str, str] = {}
        self._cache: dict[str, object] = {}

    # -- bookkeeping
    def key(self, name: str) -> str:
        if name not in self._keys:
            spec = STAGES[name]
            self._keys[name] = _digest({
                "stage": name,
                "version": __version__,
                "config": spec.config(self.cfg),
                "upstream": {u: self.key(u) for u in spec.upstream},
            })
        return self._keys[name]

    def stage_dir(self, name: str) -> Path:
        return self.run_dir / "stages" / f"{name}-{self.key(name)[:12]}"

    def done(self, name: str) -> bool:
        return (self.stage_dir(name) / "stage.json").exists()

    def write_run_meta(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.yaml").write_text(dump_config(self.cfg))
        write_json(self.run_dir / "run.json", {
            "version": __version__,
            "config_hash": _digest(self.cfg.to_dict()),
            "seeds": {
                "data": self.cfg.data.seed,
                "scorer": self.cfg.scorer.seed,
                "baselines": self.cfg.baselines.seed,
                "extract": self.cfg.extract.seed,
                "augment": self.cfg.augment.seed,
                "policy": list(self.cfg.policy.seeds),
                "eval": self.cfg.policy.eval_seed,
            },
            "stages": {n: self.stage_dir(n).relative_to(self.run_dir).as_posix() for n in STAGE_ORDER},
        })

    def run_stage(self, name: str, resolve: bool = False, force: bool = False) -> Path:
        """Run one stage; with ``resolve`` missing upstream stages run first."""
        spec = STAGES[name]
        out = self.stage_dir(name)
        if self.done(name) and not force:
            log.info("stage %s: up to date (%s)", name, out.name)
            return out
        for up in spec.upstream:
            if not self.done(up):
                if not resolve:
                    raise MissingArtifact(f"stage {name} needs {up}; run `playseg {up}` or `playseg run` first")
                self.run_stage(up, resolve=True)
        tmp = out.with_name(out.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        log.info("stage %s: running (%s)", name, out.name)
        try:
            spec.run(self, tmp)
        except Exception:
            log.error("stage %s failed; partial output left in %s", name, tmp)
            raise
        write_json(tmp / "stage.json", {
            "stage": name, "key": self.key(name), "version": __version__,
            "config": spec.config(self.cfg),
            "upstream": {u: self.key(u) for u in spec.upstream},
        })
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
        return out

    def run_all(self) -> Path:
        self.write_run_meta()
        for name in STAGE_ORDER:
            self.run_stage(name, resolve=True)
        return self.run_dir / "report"

    # -- cached loaders
    def _cached(self, key: str, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def _need(self, name: str) -> Path:
        if not self.done(name):
            raise MissingArtifact(f"stage {name} has not been run for this config")
        return self.stage_dir(name)

    def full(self) -> Dataset:
        return self._cached("full", lambda: load_dataset(self._need("generate") / "annotated"))

    def validation(self) -> Dataset:
        return self._cached("validation", lambda: load_dataset(self._need("generate") / "validation"))

    def unannotated(self) -> list[Trajectory]:
        return self._cached("unann", lambda: load_dataset(self._need("generate") / "unannotated").unannotated)

    def unann_gt(self) -> dict[str, list[LabelledSegment]]:
        def build():
            out: dict[str, list[LabelledSegment]] = {}
            for seg in load_gt_segments(self._need("generate") / "unannotated"):
                out.setdefault(seg.trajectory_id, []).append(seg)
            return out
        return self._cached("unann_gt", build)

    def trajectories(self) -> dict[str, Trajectory]:
        def build():
            out = dict(self.full().trajectories)
            out.update({t.id: t for t in self.unannotated()})
            return out
        return self._cached("trajectories", build)

    def split(self, tag: str) -> Dataset:
        def build():
            rows = read_jsonl(self._need("split") / f"{_tag_file(tag)}.jsonl")
            return Dataset([segment_from_row(r) for r in rows], self.full().trajectories, split_tag=tag)
        return self._cached(f"split:{tag}", build)

    def start(self) -> Dataset:
        return self.split(self.cfg.augment.start_split)

    def lengths(self) -> tuple[int, int]:
        lens = [s.length for s in self.start().annotated]
        return min(lens), max(lens)

    def scorer_config(self):
        return self.cfg.scorer_config(self.lengths()[1])

    def segmenter_config(self):
        return self.cfg.segmenter_config(*self.lengths())

    def crop_config(self):
        return self.cfg.crop_config(self.lengths()[1], self.scorer_config().negatives.t_max,
                                    self.segmenter_config().minlen)

    def scorer(self):
        return self._cached("scorer", lambda: load_model(self._need("train-scorer") / "scorer", "scorer"))

    def frame_classifier(self):
        return self._cached("fc", lambda: load_model(self._need("train-baselines") / "framecrop", "frame_classifier"))

    def regressor(self):
        return self._cached("br", lambda: load_model(self._need("train-baselines") / "boundarycrop",
                                                     "boundary_regressor"))

    def condition(self, name: str) -> Dataset:
        def build():
            rows = read_jsonl(self._need("augment") / "conditions" / f"{name}.jsonl")
            return Dataset([segment_from_row(r) for r in rows], self.trajectories(), split_tag="augmented")
        return self._cached(f"cond:{name}", build)

    def grid(self) -> tuple[int, int]:
        return self.cfg.data.gym.width, self.cfg.data.gym.height


# ---------------------------------------------------------------- stages


def _generate(p: Pipeline, out: Path) -> None:
    dcfg = p.cfg.data_config()
    bundle = make_datasets(dcfg)
    full = bundle.splits["full"]
    kw = {"seed": dcfg.seed, "done_marker": dcfg.gym.done_marker}
    save_dataset(out / "annotated", full, **kw)
    save_dataset(out / "validation", bundle.validation, **kw)
    gt = [s for tid in sorted(bundle.unann_gt) for s in bundle.unann_gt[tid].segments()]
    save_dataset(out / "unannotated", bundle.unannotated, gt_segments=gt, **kw)
    lengths = [t.T for t in bundle.unannotated.unannotated]
    write_json(out / "summary.json", {
        "annotated_segments": len(full),
        "annotated_trajectories": len(full.trajectories),
        "validation_segments": len(bundle.validation),
        "unannotated_trajectories": len(bundle.unannotated.unannotated),
        "unannotated_gt_segments": len(gt),
        "play_length": {"min": min(lengths), "max": max(lengths), "mean": round(float(np.mean(lengths)), 6)},
        "annotated_labels": label_histogram(full.annotated).tolist(),
        "annotated_stats": dataset_stats(full),
    })


def _split(p: Pipeline, out: Path) -> None:
    splits = make_splits(p.full(), p.cfg.data.fractions, p.cfg.data.seed)
    sizes = {}
    for tag, ds in splits.items():
        write_jsonl(out / f"{_tag_file(tag)}.jsonl", (segment_to_row(s) for s in ds.annotated))
        sizes[tag] = len(ds)
    write_json(out / "summary.json", {"sizes": sizes, "stats": {t: dataset_stats(d) for t, d in splits.items()}})


def _train_scorer(p: Pipeline, out: Path) -> None:
    start = p.start()
    scfg = p.scorer_config()
    model = scorer_mod.train(start, scfg, p.bank)
    save_model(out / "scorer", model, extra={"segment_lengths": list(p.lengths()),
                                             "train_split": start.split_tag})
    val = p.validation()
    held = scorer_mod.build_training_set(val.annotated, val.trajectories, scfg.negatives,
                                         np.random.default_rng([scfg.seed, 99]), p.bank)
    write_json(out / "info.json", {
        "train_split": start.split_tag,
        "train_segments": len(start),
        "negatives": dataclasses.asdict(scfg.negatives),
        "best_epoch": model.log.best_epoch,
        "epochs": len(model.log.losses),
        "final_loss": model.log.losses[-1] if model.log.losses else None,
        "selection_metrics": model.log.val[model.log.best_epoch] if model.log.val else None,
        "validation_metrics": scorer_mod.evaluate(model, held),
        "validation_negatives": int(len(held.Xneg)),
    })


def _train_baselines(p: Pipeline, out: Path) -> None:
    start = p.start()
    ccfg = p.crop_config()
    fc = train_frame_classifier(start, ccfg, p.bank)
    br = train_boundary_regressor(start, ccfg, p.bank)
    w, h = p.grid()
    save_model(out / "framecrop", fc, w, h)
    save_model(out / "boundarycrop", br, w, h)
    write_json(out / "info.json", {
        "crop": dataclasses.asdict(ccfg),
        "framecrop_selection": fc.log.val[fc.log.best_epoch] if fc.log.val else None,
        "boundarycrop_selection": br.log.val[br.log.best_epoch] if br.log.val else None,
    })


METHOD_IDS = {m: i for i, m in enumerate(EXTRACT_METHODS)}


def _extractor(p: Pipeline, method: str):
    if method == "random":
        return RandomExtractor(LengthStats.of(p.start()), p.scorer())
    if method == "framecrop":
        return FrameCropExtractor(p.frame_classifier())
    if method == "boundarycrop":
        return BoundaryCropExtractor(p.regressor())
    if method == "ps":
        return PSExtractor(p.scorer(), p.segmenter_config())
    raise ValueError(f"unknown extraction method {method!r}")


def extract_segments(p: Pipeline, method: str) -> tuple[list[LabelledSegment], dict]:
    """Run one extractor over every unannotated trajectory (evaluation budget)."""
    trajs = sorted(p.unannotated(), key=lambda t: t.id)
    segments: list[LabelledSegment] = []
    info = {"nfe": 0, "draws": 0, "stalls": 0, "infeasible": 0, "complexity": []}
    if method == "ps":
        model, scfg = p.scorer(), p.segmenter_config()
        for traj in trajs:
            segs, run = segment_play_trajectory(model, traj, scfg, p.bank)
            segments += label_segments(model, traj, segs, p.bank, method="ps")
            info["nfe"] += run.nfe
            info["stalls"] += len(run.stalls)
            info["infeasible"] += len(run.infeasible)
            info["complexity"].append({"trajectory_id": traj.id, "T": traj.T, "nfe": run.nfe,
                                       "dp_ops": run.dp_ops, "windows": len(run.window_starts)})
        return segments, info
    ex = _extractor(p, method)
    window = p.crop_config().window
    for i, traj in enumerate(trajs):
        rng = np.random.default_rng([p.cfg.extract.seed, METHOD_IDS[method], i])
        for _ in range(p.cfg.extract.draws_per_trajectory):
            info["draws"] += 1
            info["nfe"] += 1 if method == "random" else min(window, traj.T)
            segments += ex.extract(traj, rng, p.bank)
    return segments, info


def quality_metrics(segments: list[LabelledSegment], gt: dict[str, list[LabelledSegment]],
                    trajs: dict[str, Trajectory], tolerances, complete: bool) -> dict:
    by_traj: dict[str, list[LabelledSegment]] = {}
    for s in segments:
        by_traj.setdefault(s.trajectory_id, []).append(s)
    rows = {}
    for tol in tolerances:
        counts = BoundaryCounts()
        for tid in sorted(gt):
            counts.add(boundary_points(by_traj.get(tid, [])), boundary_points(gt[tid]), tol)
        prec = counts.precision
        rec = counts.recall if complete else None
        rows[str(tol)] = {"precision": prec, "recall": rec, "f1": f1(prec, rec) if complete else None,
                          "matched": counts.matched, "predicted": counts.predicted, "gt": counts.gt}
    score = LabelScore()
    for tid in sorted(gt):
        score.add(by_traj.get(tid, []), gt[tid], trajs[tid].T)
    return {"boundaries": rows, "label_accuracy": {"majority": score.majority, "strict": score.strict},
            "segments": len(segments)}


def _extract_stage(method: str):
    def run(p: Pipeline, out: Path) -> None:
        segments, info = extract_segments(p, method)
        trajs = {t.id: t for t in p.unannotated()}
        metrics = quality_metrics(segments, p.unann_gt(), trajs, p.cfg.extract.tolerances, method == "ps")
        metrics.update({k: v for k, v in info.items() if k != "complexity"})
        metrics["method"] = method
        write_jsonl(out / "segments.jsonl", (segment_to_row(s) for s in segments))
        write_json(out / "metrics.json", metrics)
        if info["complexity"]:
            write_jsonl(out / "complexity.jsonl", info["complexity"])
    return run


def _iou_audit(added: list[LabelledSegment], gt: dict[str, list[LabelledSegment]]) -> dict:
    if not added:
        return {"iou_ge_0.9": None, "mean_best_iou": None}
    best = []
    for s in added:
        cands = gt.get(s.trajectory_id, [])
        best.append(max((iou((s.start, s.end), (g.start, g.end)) for g in cands), default=0.0))
    best = np.array(best)
    return {"iou_ge_0.9": float((best >= 0.9).mean()), "mean_best_iou": float(best.mean())}


def _augment(p: Pipeline, out: Path) -> None:
    acfg = p.cfg.augment
    start, full = p.start(), p.full()
    model = p.scorer()
    unann = sorted(p.unannotated(), key=lambda t: t.id)
    threshold = confidence_threshold_from_validation(model, p.validation(), acfg.target_acc, p.bank)
    cut = threshold.value if acfg.confidence_filter else None
    (out / "conditions").mkdir()
    (out / "provenance").mkdir()
    summary = {"threshold": dataclasses.asdict(threshold), "filter": acfg.confidence_filter,
               "target_size": len(full), "start_size": len(start), "conditions": {}}
    gt = p.unann_gt()
    trajs = {t.id: t for t in unann}
    for cond in acfg.conditions:
        entry: dict = {}
        if cond in GT_CONDITIONS:
            ds = p.split(GT_CONDITIONS[cond])
            segs = list(ds.annotated)
            added: list[LabelledSegment] = []
        elif cond == "gt-relabel":
            keep = {s.key for s in start.annotated}
            left = [s for s in full.annotated if s.key not in keep]
            added = relabel(left, full.trajectories, model, method="gt-relabel", bank=p.bank)
            segs = list(start.annotated) + added
            entry["relabel_accuracy"] = float(np.mean([a.instruction == b.instruction for a, b in zip(added, left)])) \
                if left else None
        else:
            method = "random" if cond == "random-relabel" else cond
            extractor = _extractor(p, method)
            # the filter covers segments labelled by the labelling model; crops carry their own classes
            th = cut if cond in ("ps", "random-relabel") else None
            res = run_augmentation(start, unann, extractor, len(full), seed=acfg.seed, threshold=th, bank=p.bank)
            added, segs = res.added, list(res.dataset.annotated)
            entry.update({"shortfall": res.shortfall, "draws": res.draws, "threshold": th,
                          "rejected_confidence": res.rejected_confidence,
                          "rejected_duplicate": res.rejected_duplicate})
            entry.update(_iou_audit(added, gt))
            if added:
                score = LabelScore()
                by: dict[str, list[LabelledSegment]] = {}
                for s in added:
                    by.setdefault(s.trajectory_id, []).append(s)
                for tid in sorted(by):
                    score.add(by[tid], gt[tid], trajs[tid].T)
                entry["added_label_accuracy"] = {"majority": score.majority, "strict": score.strict}
            write_jsonl(out / "provenance" / f"{cond}.jsonl", res.provenance())
        write_jsonl(out / "conditions" / f"{cond}.jsonl", (segment_to_row(s) for s in segs))
        entry.update({"size": len(segs), "added": len(added), "stats": dataset_stats(segs),
                      "added_stats": dataset_stats(added)})
        summary["conditions"][cond] = entry
    write_json(out / "summary.json", summary)


# -- policy training fans out over (condition, seed) jobs

_JOB: dict = {}


def _policy_job(job: tuple[str, int]):
    cond, seed = job
    p: Pipeline = _JOB["pipeline"]
    model = train_bc(p.condition(cond), p.cfg.policy_config(seed), p.bank)
    return cond, seed, model


def _eval_job(job: tuple[str, int]):
    cond, seed = job
    p: Pipeline = _JOB["pipeline"]
    model = load_model(_JOB["dir"] / f"{cond}__s{seed}", "policy")
    pc = p.cfg.policy
    res = evaluate_policy(model, pc.episodes, pc.horizon, pc.eval_seed, p.cfg.data_config().gym, pc.sample)
    return cond, seed, res.to_dict()


def _fan_out(p: Pipeline, fn, jobs: list, extra: Optional[dict] = None) -> list:
    _JOB.clear()
    _JOB.update({"pipeline": p, **(extra or {})})
    try:
        if p.workers == 1 or len(jobs) == 1:
            return [fn(j) for j in jobs]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=p.workers, mp_context=ctx) as pool:
            return list(pool.map(fn, jobs))
    finally:
        _JOB.clear()


def _warm(p: Pipeline) -> None:
    # share frame features with forked workers
    for t in p.trajectories().values():
        p.bank.frames(t)


def _train_policy(p: Pipeline, out: Path) -> None:
    conds = list(p.cfg.augment.conditions)
    for c in conds:
        p.condition(c)
    _warm(p)
    jobs = [(c, s) for c in conds for s in p.cfg.policy.seeds]
    w, h = p.grid()
    info = {}
    for cond, seed, model in _fan_out(p, _policy_job, jobs):
        save_model(out / f"{cond}__s{seed}", model, w, h)
        info[f"{cond}__s{seed}"] = {"best_epoch": model.log.best_epoch,
                                    "final_loss": model.log.losses[-1] if model.log.losses else None}
    write_json(out / "info.json", info)


def _eval_policy(p: Pipeline, out: Path) -> None:
    conds = list(p.cfg.augment.conditions)
    jobs = [(c, s) for c in conds for s in p.cfg.policy.seeds]
    results: dict = {c: {} for c in conds}
    for cond, seed, res in _fan_out(p, _eval_job, jobs, {"dir": p._need("train-policy")}):
        results[cond][str(seed)] = res
    pc = p.cfg.policy
    gym = p.cfg.data_config().gym
    reference = {
        "random": evaluate_policy(RandomPolicy(pc.eval_seed), pc.episodes, pc.horizon, pc.eval_seed, gym).to_dict(),
        "bot": evaluate_policy(BotPolicy(), pc.episodes, pc.horizon, pc.eval_seed, gym).to_dict(),
    }
    write_json(out / "results.json", {"conditions": results, "reference": reference,
                                      "episodes": pc.episodes, "horizon": pc.horizon})


def _report(p: Pipeline, out: Path) -> None:
    from .report import emit_report

    sources = {name: p.stage_dir(name) if p.done(name) else None for name in STAGE_ORDER if name != "report"}
    emit_report(sources, out, p.cfg)
    final = p.run_dir / "report"
    if final.exists():
        shutil.rmtree(final)
    shutil.copytree(out, final)


STAGES: dict[str, StageSpec] = {
    "generate": StageSpec("generate", (), lambda c: _pick(c, "data.seed", "data.n_ann_records",
                                                           "data.n_unann_records", "data.n_val_records",
                                                           "data.gym"), _generate),
    "split": StageSpec("split", ("generate",), lambda c: _pick(c, "data.fractions", "data.seed"), _split),
    "train-scorer": StageSpec("train-scorer", ("split",),
                              lambda c: _pick(c, "scorer", "augment.start_split"), _train_scorer),
    "train-baselines": StageSpec("train-baselines", ("split",),
                                 lambda c: _pick(c, "baselines", "scorer.t_min", "scorer.t_max",
                                                 "segmenter.minlen", "augment.start_split"), _train_baselines),
    "extract-random": StageSpec("extract-random", ("train-scorer",),
                                lambda c: _pick(c, "extract"), _extract_stage("random")),
    "extract-framecrop": StageSpec("extract-framecrop", ("train-baselines",),
                                   lambda c: _pick(c, "extract"), _extract_stage("framecrop")),
    "extract-boundarycrop": StageSpec("extract-boundarycrop", ("train-baselines",),
                                      lambda c: _pick(c, "extract"), _extract_stage("boundarycrop")),
    "extract-ps": StageSpec("extract-ps", ("train-scorer",),
                            lambda c: _pick(c, "extract.tolerances", "segmenter"), _extract_stage("ps")),
    "augment": StageSpec("augment", ("train-scorer", "train-baselines"),
                         lambda c: _pick(c, "augment", "segmenter"), _augment),
    "train-policy": StageSpec("train-policy", ("augment",),
                              lambda c: _pick(c, "policy.hidden", "policy.lr", "policy.epochs",
                                              "policy.batch_size", "policy.seeds"), _train_policy),
    "eval-policy": StageSpec("eval-policy", ("train-policy",),
                             lambda c: _pick(c, "policy.episodes", "policy.horizon", "policy.eval_seed",
                                             "policy.sample"), _eval_policy),
    "report": StageSpec("report", ("extract-random", "extract-framecrop", "extract-boundarycrop", "extract-ps",
                                   "eval-policy"), lambda c: _pick(c, "report"), _report),
}
