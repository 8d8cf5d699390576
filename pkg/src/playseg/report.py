"""Run report: a JSON summary, CSV series per table or figure, and PNG plots.

Everything is rebuilt from stage artifacts, floats are rounded to six
decimals and no wall-clock data is included, so regenerating a report from
the same artifacts gives identical bytes.
"""
from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .core import NUM_INSTRUCTIONS, Instruction  # noqa: E402
from .io import read_json, read_jsonl, write_json  # noqa: E402
from .metrics import f1  # noqa: E402
from .policy import EvalResult, per_task_improvement  # noqa: E402

REPORT_FORMAT = 1
SOURCES = (
    "generate", "split", "train-scorer", "train-baselines",
    "extract-random", "extract-framecrop", "extract-boundarycrop", "extract-ps",
    "augment", "train-policy", "eval-policy",
)
QUALITY_METHODS = ("ps", "random", "framecrop", "boundarycrop")
EXTRACTION_CONDITIONS = ("ps", "random-relabel", "framecrop", "boundarycrop")
GT_FRACTIONS = (("gt-10", 0.1), ("gt-25", 0.25), ("gt-50", 0.5), ("gt-100", 1.0))


def _r(x):
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    return round(float(x), 6)


def _round_tree(obj):
    if isinstance(obj, dict):
        return {str(k): _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _r(obj)
    return obj


def _load(sources: dict, stage: str, name: str, missing: list[str], jsonl: bool = False):
    d = sources.get(stage)
    path = Path(d) / name if d is not None else None
    if path is None or not path.exists():
        missing.append(f"{stage}/{name}")
        return None
    return read_jsonl(path) if jsonl else read_json(path)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(_r(v)) if isinstance(v, float) else v) for v in row])


def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def policy_table(results: dict) -> dict:
    out = {}
    for cond, per_seed in results["conditions"].items():
        vals = [per_seed[s]["success"] for s in sorted(per_seed, key=int)]
        if not vals:
            continue
        mean, std = _mean_std(vals)
        out[cond] = {"mean": mean, "std": std, "seeds": len(vals), "per_seed": vals}
    return out


def orderings(table: dict) -> dict:
    """The three directional checks on seed-wise means (None when a condition is absent)."""
    def gt(a, b):
        return table[a]["mean"] > table[b]["mean"] if a in table and b in table else None

    def le(a, b):
        return table[a]["mean"] <= table[b]["mean"] if a in table and b in table else None

    return {
        "gt-100 > gt-10": gt("gt-100", "gt-10"),
        "ps > gt-10": gt("ps", "gt-10"),
        "random-relabel <= gt-10": le("random-relabel", "gt-10"),
    }


def _per_task(results: dict, added_labels: list[int], base: str = "gt-10", aug: str = "ps") -> Optional[dict]:
    conds = results["conditions"]
    if base not in conds or aug not in conds or not conds[base] or not conds[aug]:
        return None

    def avg(cond) -> EvalResult:
        runs = [conds[cond][s] for s in sorted(conds[cond], key=int)]
        tasks = sorted(runs[0]["per_task"], key=int)
        per_task = {int(t): float(np.mean([r["per_task"][t] for r in runs])) for t in tasks}
        counts = {int(t): runs[0]["counts"][t] for t in tasks}
        return EvalResult(float(np.mean([r["success"] for r in runs])), per_task, counts, runs[0]["episodes"])

    table = per_task_improvement(avg(base), avg(aug), {i: c for i, c in enumerate(added_labels)})
    return table.to_dict()


def _savefig(fig, path: Path, dpi: int) -> None:
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)


def _figures(out: Path, summary: dict, series: dict, dpi: int) -> list[str]:
    made = []
    with plt.rc_context({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}):
        table = summary.get("policy", {}).get("table") or {}
        if table:
            fig, ax = plt.subplots(figsize=(6, 3.2))
            gts = [(f, table[c]) for c, f in GT_FRACTIONS if c in table]
            if gts:
                ax.errorbar([f for f, _ in gts], [t["mean"] for _, t in gts], yerr=[t["std"] for _, t in gts],
                            marker="o", color="k", capsize=3, label="gt")
            colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
            for i, cond in enumerate(c for c in table if c not in dict(GT_FRACTIONS)):
                ax.axhline(table[cond]["mean"], ls="--", lw=1, color=colors[i % len(colors)], label=cond)
            ax.set_xscale("log")
            ax.set_xticks([f for _, f in GT_FRACTIONS], [f"{int(f * 100)}%" for _, f in GT_FRACTIONS])
            ax.set_xlabel("annotated data")
            ax.set_ylabel("success rate")
            ax.set_ylim(0, 1)
            ax.legend(fontsize=7, frameon=False, loc="lower right")
            _savefig(fig, out / "policy_vs_data.png", dpi)
            made.append("policy_vs_data.png")
        lengths = series.get("lengths") or {}
        if lengths:
            fig, ax = plt.subplots(figsize=(6, 3.2))
            allk = sorted({int(k) for h in lengths.values() for k in h})
            width = 0.8 / len(lengths)
            for i, (cond, hist) in enumerate(sorted(lengths.items())):
                total = max(1, sum(hist.values()))
                ax.bar(np.array(allk) + (i - (len(lengths) - 1) / 2) * width,
                       [hist.get(str(k), 0) / total for k in allk], width=width, label=cond)
            ax.set_xlabel("segment length")
            ax.set_ylabel("fraction of segments")
            ax.legend(fontsize=7, frameon=False)
            _savefig(fig, out / "length_hist.png", dpi)
            made.append("length_hist.png")
        labels = series.get("labels") or {}
        if labels:
            fig, ax = plt.subplots(figsize=(7, 3.2))
            width = 0.8 / len(labels)
            x = np.arange(NUM_INSTRUCTIONS)
            for i, (cond, hist) in enumerate(sorted(labels.items())):
                total = max(1, sum(hist))
                ax.bar(x + (i - (len(labels) - 1) / 2) * width, np.asarray(hist) / total, width=width, label=cond)
            ax.set_xticks(x, [Instruction(i).text.replace("go to the ", "") for i in x], rotation=60,
                          ha="right", fontsize=6)
            ax.set_ylabel("fraction of segments")
            ax.legend(fontsize=7, frameon=False)
            fig.tight_layout()
            _savefig(fig, out / "label_hist.png", dpi)
            made.append("label_hist.png")
        per_task = summary.get("per_task")
        if per_task and per_task.get("rows"):
            rows = per_task["rows"]
            fig, ax = plt.subplots(figsize=(4, 3.2))
            ax.scatter([r["added"] for r in rows], [r["improvement"] for r in rows], s=14, color="k")
            ax.set_xlabel("segments added for the task")
            ax.set_ylabel("relative improvement")
            rho = per_task.get("spearman")
            ax.set_title("rank correlation " + ("undefined" if rho is None else f"{rho:.2f}"), fontsize=8)
            fig.tight_layout()
            _savefig(fig, out / "improvement_vs_added.png", dpi)
            made.append("improvement_vs_added.png")
    return made


def emit_report(sources: dict, out: Path, cfg=None) -> dict:
    """Build the report in ``out`` from stage directories (``None`` marks a missing stage)."""
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    missing: list[str] = []
    summary: dict = {"format": REPORT_FORMAT, "version": __version__}
    if cfg is not None:
        from .config import dump_config

        (out / "config.yaml").write_text(dump_config(cfg))
    series: dict = {}

    gen = _load(sources, "generate", "summary.json", missing)
    split = _load(sources, "split", "summary.json", missing)
    summary["data"] = {"generated": gen, "splits": split["sizes"] if split else None} if gen or split else \
        {"missing": True}

    sc = _load(sources, "train-scorer", "info.json", missing)
    summary["scorer"] = sc if sc is not None else {"missing": True}
    bl = _load(sources, "train-baselines", "info.json", missing)
    summary["baselines"] = bl if bl is not None else {"missing": True}

    # segmentation quality (extraction from every unannotated trajectory)
    quality, qrows = {}, []
    for method in QUALITY_METHODS:
        m = _load(sources, f"extract-{method}", "metrics.json", missing)
        if m is None:
            quality[method] = {"missing": True}
            continue
        for tol, b in sorted(m["boundaries"].items(), key=lambda kv: int(kv[0])):
            b["f1"] = f1(b["precision"], b["recall"]) if b["recall"] is not None else None
            qrows.append([method, int(tol), b["precision"], b["recall"], b["f1"],
                          m["label_accuracy"]["majority"], m["label_accuracy"]["strict"], m["segments"], m["nfe"]])
        quality[method] = m
    summary["segmentation_quality"] = quality
    if qrows:
        _write_csv(out / "quality.csv", ["method", "tolerance", "precision", "recall", "f1",
                                                "label_acc_majority", "label_acc_strict", "segments", "nfe"], qrows)
    prec = {k: quality[k]["boundaries"]["0"]["precision"] for k in QUALITY_METHODS
            if "boundaries" in quality.get(k, {})}
    if "ps" in prec:
        # undefined precision (nothing extracted) leaves the comparison undecided
        summary["quality_orderings"] = {
            f"ps > {k}": (prec["ps"] > prec[k]) if prec[k] is not None and prec["ps"] is not None else None
            for k in ("random", "framecrop", "boundarycrop") if k in prec}

    comp = _load(sources, "extract-ps", "complexity.jsonl", missing, jsonl=True)
    if comp:
        T = np.array([c["T"] for c in comp], dtype=float)
        summary["complexity"] = {
            "trajectories": len(comp),
            "nfe_total": int(sum(c["nfe"] for c in comp)),
            "nfe_per_step": float(sum(c["nfe"] for c in comp) / T.sum()),
            "dp_ops_total": int(sum(c["dp_ops"] for c in comp)),
            "windows_total": int(sum(c["windows"] for c in comp)),
            "stall_events": quality.get("ps", {}).get("stalls"),
            "stall_rule": "forced advance by the stall step after a repeated window start",
        }
        _write_csv(out / "complexity.csv", ["trajectory_id", "T", "nfe", "dp_ops", "windows"],
                   [[c["trajectory_id"], c["T"], c["nfe"], c["dp_ops"], c["windows"]] for c in comp])
    else:
        summary["complexity"] = {"missing": True}

    aug = _load(sources, "augment", "summary.json", missing)
    if aug is not None:
        conds = {}
        series["lengths"], series["labels"] = {}, {}
        for cond, entry in aug["conditions"].items():
            conds[cond] = {k: v for k, v in entry.items() if k not in ("stats", "added_stats")}
            stats = entry["added_stats"] if cond in EXTRACTION_CONDITIONS else entry["stats"]
            if cond in EXTRACTION_CONDITIONS or cond == "gt-100":
                name = f"{cond} (added)" if cond in EXTRACTION_CONDITIONS else cond
                series["lengths"][name] = stats["lengths"]
                series["labels"][name] = stats["labels"]
        summary["augmentation"] = {"threshold": aug["threshold"], "filter": aug["filter"],
                                   "target_size": aug["target_size"], "start_size": aug["start_size"],
                                   "conditions": conds}
        _write_csv(out / "series_lengths.csv", ["dataset", "length", "count"],
                   [[n, int(k), c] for n, h in sorted(series["lengths"].items())
                    for k, c in sorted(h.items(), key=lambda kv: int(kv[0]))])
        _write_csv(out / "series_labels.csv", ["dataset", "label_id", "instruction", "count"],
                   [[n, i, Instruction(i).text, c] for n, h in sorted(series["labels"].items())
                    for i, c in enumerate(h)])
    else:
        summary["augmentation"] = {"missing": True}

    res = _load(sources, "eval-policy", "results.json", missing)
    if res is not None:
        table = policy_table(res)
        summary["policy"] = {"table": table, "orderings": orderings(table), "reference": {
            k: v["success"] for k, v in res["reference"].items()}, "episodes": res["episodes"],
            "horizon": res["horizon"]}
        _write_csv(out / "policy.csv", ["condition", "mean", "std", "seeds"],
                   [[c, t["mean"], t["std"], t["seeds"]] for c, t in table.items()])
        _write_csv(out / "policy_seeds.csv", ["condition", "seed", "success"],
                   [[c, int(s), v["success"]] for c, per in res["conditions"].items()
                    for s, v in sorted(per.items(), key=lambda kv: int(kv[0]))])
        _write_csv(out / "series_data_fraction.csv", ["fraction", "condition", "mean", "std"],
                   [[f, c, table[c]["mean"], table[c]["std"]] for c, f in GT_FRACTIONS if c in table])
        added = aug["conditions"]["ps"]["added_stats"]["labels"] if aug and "ps" in aug["conditions"] else None
        pt = _per_task(res, added) if added is not None else None
        summary["per_task"] = pt if pt is not None else {"missing": True}
        if pt is not None:
            _write_csv(out / "per_task.csv", ["label_id", "instruction", "base", "augmented",
                                                   "improvement", "added"],
                       [[r["label_id"], r["instruction"], r["base"], r["augmented"], r["improvement"], r["added"]]
                        for r in pt["rows"]])
    else:
        summary["policy"] = {"missing": True}
        summary["per_task"] = {"missing": True}

    summary = _round_tree(summary)
    figs = _figures(out, summary, series, getattr(getattr(cfg, "report", None), "dpi", 100)) \
        if cfg is None or cfg.report.figures else []
    summary["figures"] = figs
    summary["missing"] = sorted(set(missing))
    write_json(out / "summary.json", summary)
    return summary


def report_from_run_dir(run_dir: Path, out: Optional[Path] = None) -> dict:
    """Report for whatever a run directory holds; absent stages become missing sections."""
    run_dir = Path(run_dir)
    sources: dict = {s: None for s in SOURCES}
    meta = run_dir / "run.json"
    if meta.exists():
        stages = read_json(meta).get("stages", {})
        for s in SOURCES:
            d = run_dir / stages[s] if s in stages else None
            sources[s] = d if d is not None and (d / "stage.json").exists() else None
    cfg = None
    if (run_dir / "config.yaml").exists():
        from .config import load_config

        cfg = load_config(run_dir / "config.yaml")
    return emit_report(sources, out if out is not None else run_dir / "report", cfg)


def summary_text(summary: dict) -> str:
    """Short human-readable digest of a summary."""
    lines = []
    pol = summary.get("policy", {})
    if "table" in pol:
        lines.append("policy success (mean ± std over seeds):")
        for c, t in pol["table"].items():
            lines.append(f"  {c:15s} {t['mean']:.3f} ± {t['std']:.3f}")
        for k, v in pol["orderings"].items():
            lines.append(f"  ordering {k}: {v}")
    q = summary.get("segmentation_quality", {})
    for m, v in q.items():
        if "boundaries" in v:
            b = v["boundaries"]["0"]
            lines.append(f"quality {m:12s} precision={b['precision']} recall={b['recall']} "
                         f"label_acc={v['label_accuracy']['majority']}")
    if summary.get("missing"):
        lines.append("missing: " + ", ".join(summary["missing"]))
    return "\n".join(lines)


def dumps_summary(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=2)
