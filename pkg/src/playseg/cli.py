"""Command-line entry point: ``playseg <command> [options]``.

Every experiment stage is a subcommand working inside one run directory;
``run`` executes them all, skipping stages whose inputs are unchanged.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import CheckpointError, load_model, read_meta
from .config import EXTRACT_METHODS, ConfigError, default_config_text, dump_config, load_config
from .io import DataFormatError, load_dataset, read_jsonl, segment_to_row, trajectory_from_row, write_json, write_jsonl
from .nn import DivergenceError
from .pipeline import STAGE_ORDER, MissingArtifact, Pipeline
from .segmenter import InfeasibleSegmentation, label_segments, segment_play_trajectory

log = logging.getLogger("playseg")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_INFEASIBLE = 0, 1, 2, 3, 4, 5
RUN_DIR_ENV, WORKERS_ENV = "PLAYSEG_RUN_DIR", "PLAYSEG_WORKERS"
DEFAULT_RUN_DIR = "playseg-run"

STAGE_COMMANDS = ("generate", "split", "train-scorer", "train-baselines", "augment",
                  "train-policy", "eval-policy", "report")

# generate flags: (flag, dotted config path, type)
GENERATE_FLAGS = (
    ("--n-ann", "data.n_ann_records", int),
    ("--n-unann", "data.n_unann_records", int),
    ("--n-val", "data.n_val_records", int),
    ("--seed", "data.seed", int),
    ("--width", "data.gym.width", int),
    ("--height", "data.gym.height", int),
    ("--distractors", "data.gym.num_distractors", int),
    ("--num-tasks", "data.gym.num_tasks", int),
)


def _env_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=None, help="YAML config (defaults: `playseg config`)")
    p.add_argument("--run-dir", type=Path, default=None,
                   help=f"run directory (env {RUN_DIR_ENV}, default ./{DEFAULT_RUN_DIR})")
    p.add_argument("--workers", type=int, default=None, help=f"worker processes (env {WORKERS_ENV}, default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="playseg", description="Segment play trajectories and use the segments to augment a small "
                                    "annotated dataset. Stages share one run directory.")
    parser.add_argument("--version", action="version", version=f"playseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    stage_help = {
        "generate": "generate annotated, validation and unannotated play data",
        "split": "nested annotated subsets of the full annotated set",
        "train-scorer": "train the segment scorer on the starting split",
        "train-baselines": "train the frame-wise and boundary-regression crop baselines",
        "augment": "grow the starting split to full size under every condition",
        "train-policy": "behaviour-clone one policy per condition and seed",
        "eval-policy": "success rates of the trained policies",
        "report": "tables, series files and figures",
    }
    for name in STAGE_COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=stage_help[name])
        sp.add_argument("--resolve", action="store_true", help="run missing upstream stages first")
        sp.add_argument("--force", action="store_true", help="rerun even if up to date")
        if name == "generate":
            for flag, path, typ in GENERATE_FLAGS:
                sp.add_argument(flag, type=typ, default=None, help=f"overrides {path}")
            sp.add_argument("--done-marker", action=argparse.BooleanOptionalAction, default=None,
                            help="overrides data.gym.done_marker")

    ex = sub.add_parser("extract", parents=[common], help="extract labelled segments from unannotated play")
    ex.add_argument("--method", choices=EXTRACT_METHODS, required=True)
    ex.add_argument("--resolve", action="store_true")
    ex.add_argument("--force", action="store_true")

    seg = sub.add_parser("segment", parents=[common], help="segment trajectories with a scorer checkpoint")
    seg.add_argument("--checkpoint", type=Path, required=True, help="scorer checkpoint path (without suffix)")
    seg.add_argument("--trajectories", type=Path, required=True,
                     help="dataset directory or JSONL file of trajectory records")
    seg.add_argument("--out", type=Path, required=True, help="output directory")
    seg.add_argument("--minlen", type=int, default=None)
    seg.add_argument("--maxlen", type=int, default=None)

    sub.add_parser("run", parents=[common], help="run every stage (resumable)")
    st = sub.add_parser("selftest", parents=[common], help="exact-DP and gradient self checks")
    st.add_argument("--cases", type=int, default=50)
    sub.add_parser("config", parents=[common], help="print the default (or resolved --config) configuration")
    return parser


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _run_dir(args) -> Path:
    return args.run_dir or Path(os.environ.get(RUN_DIR_ENV, DEFAULT_RUN_DIR))


def _resolve_config(args):
    # without --config, a run directory keeps using the config it was created with
    path = args.config
    if path is None and args.command != "segment" and (_run_dir(args) / "config.yaml").exists():
        path = _run_dir(args) / "config.yaml"
        log.info("using %s", path)
    cfg = load_config(path)
    if args.command == "generate":
        raw = cfg.to_dict()
        for flag, path, _ in GENERATE_FLAGS:
            val = getattr(args, flag.lstrip("-").replace("-", "_"))
            if val is not None:
                node = raw
                *head, leaf = path.split(".")
                for k in head:
                    node = node[k]
                node[leaf] = val
        if args.done_marker is not None:
            raw["data"]["gym"]["done_marker"] = args.done_marker
        from .config import from_dict

        cfg = from_dict(raw)
    return cfg


def _pipeline(args, cfg) -> Pipeline:
    run_dir = _run_dir(args)
    workers = args.workers if args.workers is not None else _env_workers()
    if workers < 1:
        raise ConfigError("--workers must be positive")
    p = Pipeline(cfg, run_dir, workers)
    p.write_run_meta()
    return p


def _read_trajectories(path: Path):
    if path.is_dir():
        ds = load_dataset(path)
        trajs = {t.id: t for t in ds.unannotated}
        trajs.update(ds.trajectories)
        return [trajs[k] for k in sorted(trajs)]
    if not path.exists():
        raise DataFormatError(f"trajectory file {path} not found")
    return [trajectory_from_row(r) for r in read_jsonl(path)]


def cmd_segment(args, cfg) -> int:
    model = load_model(args.checkpoint, "scorer")
    lengths = read_meta(args.checkpoint).get("extra", {}).get("segment_lengths")
    if lengths is None:
        lo, hi = args.minlen or cfg.segmenter.minlen, args.maxlen or cfg.segmenter.maxlen
        if lo is None or hi is None:
            raise ConfigError("checkpoint records no segment lengths; pass --minlen and --maxlen")
    else:
        lo, hi = lengths
    try:
        scfg = cfg.segmenter_config(lo, hi)
        band = {k: v for k, v in (("minlen", args.minlen), ("maxlen", args.maxlen)) if v is not None}
        scfg = dataclasses.replace(scfg, **band)
    except ValueError as exc:
        raise ConfigError(f"segment length band: {exc}") from exc
    trajs = _read_trajectories(args.trajectories)
    segments, logs = [], []
    for traj in trajs:
        h, w = traj.grid_shape
        if (w, h) != (model.width, model.height):
            raise DataFormatError(f"trajectory {traj.id} grid {w}x{h} does not match the "
                                  f"checkpoint ({model.width}x{model.height})")
        segs, run = segment_play_trajectory(model, traj, scfg)
        segments += label_segments(model, traj, segs, method="ps")
        logs.append(run.to_dict())
    args.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(args.out / "segments.jsonl", (segment_to_row(s) for s in segments))
    write_jsonl(args.out / "log.jsonl", logs)
    write_json(args.out / "segmenter.json", dataclasses.asdict(scfg))
    bad = [r["trajectory_id"] for r in logs if r["infeasible"]]
    print(f"{len(segments)} segments from {len(trajs)} trajectories -> {args.out}")
    if bad:
        raise InfeasibleSegmentation(f"no feasible segmentation for some windows of {len(bad)} trajectories "
                                     f"(first: {bad[0]}); see log.jsonl")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = True
    for name, passed, detail in run_selftest(args.cases):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_FAIL


def dispatch(args) -> int:
    if args.command == "selftest":
        return cmd_selftest(args)
    if args.command == "config":
        print(default_config_text() if args.config is None else dump_config(load_config(args.config)), end="")
        return EXIT_OK
    cfg = _resolve_config(args)
    if args.command == "segment":
        return cmd_segment(args, cfg)
    p = _pipeline(args, cfg)
    if args.command == "run":
        report = p.run_all()
        from .report import summary_text
        from .io import read_json

        print(summary_text(read_json(report / "summary.json")))
        print(f"report: {report}")
        return EXIT_OK
    name = f"extract-{args.method}" if args.command == "extract" else args.command
    assert name in STAGE_ORDER
    out = p.run_stage(name, resolve=args.resolve, force=args.force)
    print(out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))
    try:
        return dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataFormatError, MissingArtifact, CheckpointError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except InfeasibleSegmentation as exc:
        log.error("infeasible segmentation: %s", exc)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
