"""One test per acceptance criterion; each records a PASS/FAIL line printed after the run.

The default-configuration pipeline runs once per session (about ten minutes
on one core) and feeds criteria 6 to 8.
"""
import json
import time

import numpy as np
import pytest

from playseg.augment import confidence_threshold_from_validation
from playseg.config import from_dict, load_config
from playseg.metrics import BoundaryCounts, LabelScore, boundary_precision_recall, f1
from playseg.pipeline import Pipeline
from playseg.segmenter import (
    OracleScorer,
    ScoreMatrix,
    SegmenterConfig,
    band_pair_count,
    brute_force_segment,
    build_score_matrix,
    dp_segment,
    evaluate_segmentation,
    label_segments,
    segment_play_trajectory,
)
from playseg.selftest import check_policy_gradient, check_scorer_gradient
from playseg.synthgym import generate_play_trajectory

pytestmark = pytest.mark.slow

TINY = {
    "data": {"n_ann_records": 30, "n_unann_records": 10, "n_val_records": 5},
    "scorer": {"epochs": 3},
    "baselines": {"epochs": 3},
    "policy": {"seeds": [0, 1], "episodes": 64, "epochs": 3},
}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("default-run")
    t = time.perf_counter()
    Pipeline(load_config(None), run_dir).run_all()
    elapsed = time.perf_counter() - t
    summary = json.loads((run_dir / "report" / "summary.json").read_text())
    return run_dir, summary, elapsed


def test_criterion_1_dp_equals_brute_force(acceptance):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    worst, n, infeasible_agree = 0.0, 0, True
    for i in range(240):
        T = int(rng.integers(1, 13))
        if i % 2 == 0:
            lo, hi = 1, T
        else:
            lo = int(rng.integers(1, T + 1))
            hi = int(rng.integers(lo, T + 1))
        scores = ScoreMatrix.from_array(rng.uniform(0.001, 0.999, (T, T)), lo, hi)
        dp, bf = dp_segment(scores), brute_force_segment(scores)
        infeasible_agree &= dp.feasible == bf.feasible
        if dp.feasible and bf.feasible:
            worst = max(worst, abs(dp.value - bf.value),
                        abs(evaluate_segmentation(scores, dp.segmentation.boundaries) - bf.value))
            n += 1
    elapsed = time.perf_counter() - t
    ok = infeasible_agree and n >= 200 and worst <= 1e-9 and elapsed < 30
    acceptance[1] = (ok, f"{n} feasible matrices (T<=12), max |dp - brute| {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_oracle_scorer_end_to_end(acceptance):
    t = time.perf_counter()
    recs = [generate_play_trajectory(5000 + i, traj_id=f"acc-{i:02d}") for i in range(50)]
    oracle = OracleScorer({r.trajectory.id: r for r in recs}, p_true=0.99, p_false=0.01)
    lens = [s.length for r in recs for s in r.segments()]
    cfg = SegmenterConfig(window=max(32, max(lens)), minlen=min(lens), maxlen=max(lens))
    counts, labels = BoundaryCounts(), LabelScore()
    for r in recs:
        segs, _ = segment_play_trajectory(oracle, r.trajectory, cfg)
        gt = r.segments()
        counts.add([e - 1 for _, e in segs], [g.end - 1 for g in gt])
        labels.add(label_segments(oracle, r.trajectory, segs), gt, r.trajectory.T)
    elapsed = time.perf_counter() - t
    ok = counts.precision == counts.recall == labels.majority == 1.0 and elapsed < 120
    acceptance[2] = (ok, f"precision {counts.precision}, recall {counts.recall}, label accuracy "
                         f"{labels.majority} on 50 records, {elapsed:.1f}s")
    assert ok


class _Counting:
    def __init__(self, rng):
        self.rng, self.calls = rng, 0

    def segment_probs(self, traj, starts, ends, bank=None):
        self.calls += len(starts)
        return self.rng.uniform(0.01, 0.99, len(starts))


def test_criterion_3_complexity_accounting(acceptance):
    rng = np.random.default_rng(3)
    traj = generate_play_trajectory(77).trajectory
    nfe_ok = True
    for _ in range(60):
        T = int(rng.integers(1, min(traj.T, 40) + 1))
        lo = int(rng.integers(1, T + 1))
        hi = int(rng.integers(lo, T + 1))
        sc = _Counting(rng)
        m = build_score_matrix(sc, traj, SegmenterConfig(window=T, minlen=lo, maxlen=hi), 0, T)
        nfe_ok &= m.nfe == sc.calls == band_pair_count(T, lo, hi)
    Ts = np.array([50, 100, 200])
    ops = np.array([dp_segment(ScoreMatrix.from_array(rng.uniform(0.01, 0.99, (T, T)))).inner_ops for T in Ts])
    c = float((ops * Ts**3).sum() / (Ts**6).sum())
    rel = np.abs(ops - c * Ts**3) / ops
    ok = nfe_ok and rel.max() <= 0.10
    acceptance[3] = (ok, f"NFE equals the band-pair count on 60 windows: {nfe_ok}; ops {ops.tolist()} fit "
                         f"{c:.4f}*T^3 with max relative error {rel.max():.2%}")
    assert ok


def test_criterion_4_gradient_checks(acceptance):
    name_s, ok_s, det_s = check_scorer_gradient(probes=20)
    name_p, ok_p, det_p = check_policy_gradient(probes=20)
    acceptance[4] = (ok_s and ok_p, f"scorer: {det_s}; policy: {det_p}")
    assert ok_s and ok_p


@pytest.mark.xfail(strict=True, reason="the published F1 is not the harmonic mean of the published P/R")
def test_criterion_5_metric_units(acceptance):
    rng = np.random.default_rng(5)
    oracle_ok = True
    for _ in range(100):
        T = int(rng.integers(2, 80))
        P = set(rng.choice(T, int(rng.integers(0, T)), replace=False).tolist())
        G = set(rng.choice(T, int(rng.integers(1, T)), replace=False).tolist())
        p, r = boundary_precision_recall(P, G)
        oracle_ok &= p == (len(P & G) / len(P) if P else None) and r == len(P & G) / len(G)
    value = f1(0.826, 0.627)
    ref_ok = abs(value - 0.716) <= 0.002
    acceptance[5] = (oracle_ok and ref_ok, f"set oracle on 100 cases: {oracle_ok}; f1(0.826, 0.627) = "
                                           f"{value:.4f} vs 0.716 +- 0.002 (harmonic mean kept)")
    assert oracle_ok and ref_ok


def test_criterion_6_policy_orderings(default_run, acceptance):
    _, summary, elapsed = default_run
    table = summary["policy"]["table"]
    order = summary["policy"]["orderings"]
    seeds = {t["seeds"] for t in table.values()}
    means = {k: table[k]["mean"] for k in ("gt-100", "gt-10", "ps", "random-relabel")}
    ok = seeds == {8} and all(order.values()) and elapsed < 30 * 60
    acceptance[6] = (ok, f"8-seed means {means}; orderings {order}; default run {elapsed / 60:.1f} min")
    assert ok


def test_criterion_7_ps_precision_beats_crops(default_run, acceptance):
    _, summary, _ = default_run
    q = summary["segmentation_quality"]
    prec = {m: q[m]["boundaries"]["0"]["precision"] for m in ("ps", "framecrop", "boundarycrop")}
    ok = None not in prec.values() and prec["ps"] > prec["framecrop"] and prec["ps"] > prec["boundarycrop"]
    acceptance[7] = (ok, f"exact-boundary precision {prec}")
    assert ok


def test_criterion_8_threshold_contract(default_run, acceptance):
    run_dir, summary, _ = default_run
    p = Pipeline(load_config(None), run_dir)
    model, val = p.scorer(), p.validation()
    stored = summary["augmentation"]["threshold"]
    th = confidence_threshold_from_validation(model, val, 0.9, p.bank)
    conf, correct = [], []
    for seg in val.annotated:
        d = model.label_dists(val.trajectories[seg.trajectory_id], [seg.start], [seg.end], p.bank)[0]
        conf.append(d.max())
        correct.append(int(np.argmax(d)) == seg.instruction.label_id)
    conf, correct = np.array(conf), np.array(correct)
    kept = conf >= th.value
    acc = float(correct[kept].mean())
    ok = th.reachable and acc >= 0.9 and abs(th.value - stored["value"]) <= 1e-6 and kept.sum() == th.kept
    acceptance[8] = (ok, f"threshold {th.value:.4f} keeps {int(kept.sum())}/{len(conf)} validation segments "
                         f"at recomputed accuracy {acc:.3f}")
    assert ok


def test_criterion_9_byte_identical_reports(tmp_path, acceptance):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        Pipeline(from_dict(TINY), d).run_all()
    files = sorted(f.relative_to(dirs[0] / "report") for f in (dirs[0] / "report").rglob("*") if f.is_file())
    other = sorted(f.relative_to(dirs[1] / "report") for f in (dirs[1] / "report").rglob("*") if f.is_file())
    diff = [str(f) for f in files if (dirs[0] / "report" / f).read_bytes() != (dirs[1] / "report" / f).read_bytes()]
    ok = files == other and not diff and any(f.suffix == ".png" for f in files)
    acceptance[9] = (ok, f"{len(files)} report files compared across two runs, differing: {diff or 'none'}")
    assert ok
