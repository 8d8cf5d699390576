import numpy as np
import pytest
from conftest import dataset_of

from playseg.augment import (
    PSExtractor,
    RandomExtractor,
    confidence_threshold_from_validation,
    dataset_stats,
    relabel,
    run_augmentation,
    threshold_sweep,
)
from playseg.baselines import LengthStats
from playseg.core import Dataset, Instruction, LabelledSegment
from playseg.segmenter import OracleScorer, SegmenterConfig


class OracleExtractor:
    """Returns the ground-truth segments of a record, most confident first."""

    method = "oracle"
    exhaustive = True

    def __init__(self, records):
        self.by_id = {r.trajectory.id: r for r in records}

    def extract(self, traj, rng, bank):
        return [LabelledSegment(s.trajectory_id, s.start, s.end, s.instruction, 0.9, self.method)
                for s in self.by_id[traj.id].segments()]


class PerfectLabeller:
    def __init__(self, records):
        self.by_id = {r.trajectory.id: r for r in records}

    def label_dists(self, traj, starts, ends, bank=None):
        out = np.full((len(starts), 18), 0.01 / 17)
        gt = {(s.start, s.end): s.instruction.label_id for s in self.by_id[traj.id].segments()}
        for i, key in enumerate(zip(starts, ends)):
            out[i, gt.get(key, 0)] = 0.99
        return out


def test_threshold_zero_when_all_correct():
    t = threshold_sweep(np.array([0.2, 0.5, 0.9]), np.array([True, True, True]), 0.9)
    assert t.value == 0.0 and t.accuracy == 1.0 and t.kept == 3 and t.reachable


def test_threshold_smallest_passing_cut():
    conf = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    correct = np.array([False, False, True, True, True])
    t = threshold_sweep(conf, correct, 0.9)
    assert t.value == 0.3 and t.kept == 3 and t.accuracy == 1.0


def test_threshold_ties_share_a_cut():
    t = threshold_sweep(np.array([0.5, 0.5, 0.9]), np.array([False, True, True]), 0.9)
    assert t.value == 0.9 and t.kept == 1


def test_threshold_unreachable():
    t = threshold_sweep(np.array([0.3, 0.8]), np.array([False, False]), 0.9)
    assert not t.reachable and t.value == 0.8


def test_threshold_recomputation_and_monotone():
    rng = np.random.default_rng(0)
    prev = -1.0
    for target in (0.5, 0.6, 0.7, 0.8, 0.9):
        conf = rng.uniform(size=300)
        correct = rng.uniform(size=300) < conf
        t = threshold_sweep(conf, correct, target)
        assert t.reachable
        kept = conf >= t.value
        assert correct[kept].mean() >= target and kept.sum() == t.kept
        # any smaller observed cut fails the target
        for c in np.unique(conf[conf < t.value]):
            assert correct[conf >= c].mean() < target
    # on fixed data the cut is non-decreasing in the target
    conf = rng.uniform(size=300)
    correct = rng.uniform(size=300) < conf
    for target in np.linspace(0.5, 0.95, 10):
        v = threshold_sweep(conf, correct, target).value
        assert v >= prev
        prev = v


def test_threshold_from_validation_recomputes(small_scorer, small_bundle, bank):
    val = small_bundle.validation
    t = confidence_threshold_from_validation(small_scorer, val, 0.9, bank)
    hits = []
    for s in val.annotated:
        d = small_scorer.label_dists(val.trajectories[s.trajectory_id], [s.start], [s.end], bank)[0]
        if d.max() >= t.value:
            hits.append(d.argmax() == s.instruction.label_id)
    assert len(hits) == t.kept
    if t.reachable:
        assert np.mean(hits) >= 0.9


def test_target_equal_to_start_is_noop(records, bank):
    start = dataset_of(records[:3])
    res = run_augmentation(start, [r.trajectory for r in records[3:]], OracleExtractor(records), len(start),
                           bank=bank)
    assert res.added == [] and res.dataset.annotated == start.annotated and res.shortfall == 0


def test_oracle_reaches_exact_target(records, bank):
    start = dataset_of(records[:3])
    before = (list(start.annotated), sorted(start.trajectories))
    pool = [r.trajectory for r in records[3:]]
    target = len(start) + 25
    res = run_augmentation(start, pool, OracleExtractor(records), target, seed=4, bank=bank)
    assert len(res.dataset) == target and res.shortfall == 0
    assert (start.annotated, sorted(start.trajectories)) == before
    keys = [s.key for s in res.dataset.annotated]
    assert len(keys) == len(set(keys))
    for s in res.added:
        assert s.trajectory_id in res.dataset.trajectories
    prov = res.provenance()
    assert len(prov) == 25 and all(p["method"] == "oracle" for p in prov)
    res.dataset.validate()


def test_duplicates_and_threshold_rejected(records, bank):
    start = dataset_of(records[:4])
    res = run_augmentation(start, [r.trajectory for r in records[:4]], OracleExtractor(records), len(start) + 5,
                           bank=bank)
    assert res.added == [] and res.shortfall == 5 and res.rejected_duplicate > 0
    res = run_augmentation(dataset_of(records[:1]), [r.trajectory for r in records[5:]], OracleExtractor(records),
                           len(records[0].segments()) + 3, threshold=0.95, bank=bank)
    assert res.added == [] and res.rejected_confidence > 0


def test_target_below_start_rejected(records):
    with pytest.raises(ValueError):
        run_augmentation(dataset_of(records[:2]), [], OracleExtractor(records), 1)


def test_augmentation_deterministic(records, bank):
    start = dataset_of(records[:2])
    pool = [r.trajectory for r in records[2:]]
    ext = RandomExtractor(LengthStats(3, 8), PerfectLabeller(records))
    a = run_augmentation(start, pool, ext, len(start) + 30, seed=9, bank=bank)
    b = run_augmentation(start, pool, ext, len(start) + 30, seed=9, bank=bank)
    assert a.provenance() == b.provenance()


def test_ps_extractor_with_oracle_scorer(records, bank):
    oracle = OracleScorer({r.trajectory.id: r for r in records})
    lens = [s.length for r in records for s in r.segments()]
    cfg = SegmenterConfig(window=64, minlen=min(lens), maxlen=max(lens))
    ext = PSExtractor(oracle, cfg)
    got = ext.extract(records[5].trajectory, None, bank)
    want = records[5].segments()
    assert [(s.start, s.end, s.instruction) for s in got] == [(s.start, s.end, s.instruction) for s in want]
    assert len(ext.logs) == 1


def test_relabel_uses_argmax(records, bank):
    segs = records[0].segments()
    wrong = [LabelledSegment(s.trajectory_id, s.start, s.end, Instruction((s.instruction.label_id + 1) % 18))
             for s in segs]
    out = relabel(wrong, {records[0].trajectory.id: records[0].trajectory}, PerfectLabeller(records), bank=bank)
    assert [s.instruction for s in out] == [s.instruction for s in segs]
    assert all(s.method == "relabel" and s.confidence == pytest.approx(0.99) for s in out)


def test_dataset_stats_sums(records):
    ds = dataset_of(records)
    st = dataset_stats(ds)
    assert st["size"] == len(ds) == sum(st["labels"]) == sum(st["lengths"].values())
    assert dataset_stats(Dataset()) == {"size": 0, "labels": [0] * 18, "lengths": {}}
