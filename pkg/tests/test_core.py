import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from playseg.core import (
    START,
    Dataset,
    Instruction,
    LabelledSegment,
    Observations,
    Segmentation,
    SegmentationError,
    Trajectory,
    boundaries_to_segments,
    last_boundary_before,
    segments_to_boundaries,
    slice_segment,
)


def toy_traj(T: int, tid: str = "t") -> Trajectory:
    grids = np.zeros((T + 1, 4, 4), dtype=np.int8)
    poses = np.stack([np.arange(T + 1) % 4, np.zeros(T + 1, dtype=int)], axis=1)
    return Trajectory(tid, Observations(grids, poses, np.zeros(T + 1, dtype=np.int8)), np.zeros(T, dtype=np.int8))


complete_alpha = st.lists(st.integers(0, 1), min_size=0, max_size=63).map(lambda xs: tuple(xs) + (1,))


def test_boundaries_to_segments_examples():
    assert boundaries_to_segments(Segmentation("x", (1,))) == [(0, 1)]
    assert boundaries_to_segments((0, 1, 0, 1)) == [(0, 2), (2, 4)]


def test_segments_to_boundaries_examples():
    assert segments_to_boundaries([(0, 1)], 1).boundaries == (1,)
    assert segments_to_boundaries([(0, 2), (2, 4)], 4).boundaries == (0, 1, 0, 1)


def test_incomplete_segmentation_rejected():
    with pytest.raises(SegmentationError):
        boundaries_to_segments((0, 1, 0))


@pytest.mark.parametrize("intervals", [[(0, 2), (3, 4)], [(0, 2), (1, 4)], [(0, 2)], [(0, 2), (2, 5)]])
def test_segments_to_boundaries_rejects_gaps_overlaps_and_bad_cover(intervals):
    with pytest.raises(SegmentationError):
        segments_to_boundaries(intervals, 4)


@settings(max_examples=1000, deadline=None)
@given(complete_alpha)
def test_round_trip(alpha):
    segs = boundaries_to_segments(alpha)
    assert segments_to_boundaries(segs, len(alpha)).boundaries == alpha
    assert sum(e - s for s, e in segs) == len(alpha)
    assert len(segs) == sum(alpha)
    assert all(b[0] == a[1] for a, b in zip(segs, segs[1:]))


def test_last_boundary_before_examples():
    assert last_boundary_before((0, 0, 0), 2) == START
    assert last_boundary_before((0, 1, 0), 2) == 1


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40), st.data())
def test_last_boundary_before_linear_scan(alpha, data):
    t = data.draw(st.integers(0, len(alpha) - 1))
    ones = [i for i in range(t + 1) if alpha[i] == 1]
    assert last_boundary_before(alpha, t) == (ones[-1] if ones else START)


def test_slice_segment_examples():
    traj = toy_traj(5)
    full = slice_segment(traj, 0, 5)
    assert len(full) == 6
    np.testing.assert_array_equal(full.poses, traj.observations.poses)
    assert len(slice_segment(traj, 2, 4)) == 3
    with pytest.raises(IndexError):
        slice_segment(traj, 3, 3)
    with pytest.raises(IndexError):
        slice_segment(traj, 0, 6)


@given(st.integers(1, 20), st.data())
def test_reslice_identity(T, data):
    traj = toy_traj(T)
    t0 = data.draw(st.integers(0, T - 1))
    t1 = data.draw(st.integers(t0 + 1, T))
    obs = slice_segment(traj, t0, t1)
    sub = Trajectory("s", obs, np.zeros(len(obs) - 1, dtype=np.int8))
    again = slice_segment(sub, 0, len(obs) - 1)
    np.testing.assert_array_equal(again.grids, obs.grids)
    np.testing.assert_array_equal(again.poses, obs.poses)


def test_trajectory_invariants():
    obs = toy_traj(3).observations
    with pytest.raises(ValueError):
        Trajectory("bad", obs, np.zeros(2, dtype=np.int8))
    with pytest.raises(ValueError):
        Trajectory("empty", obs[:1], np.zeros(0, dtype=np.int8))


def test_instruction_vocabulary():
    texts = {Instruction(i).text for i in range(18)}
    assert len(texts) == 18
    assert Instruction(0).text == "go to the red key"
    assert Instruction.from_object(3, 6) == Instruction(17)
    with pytest.raises(ValueError):
        Instruction(18)


def test_segment_and_dataset_validation():
    with pytest.raises(ValueError):
        LabelledSegment("t", 3, 3, Instruction(0))
    with pytest.raises(ValueError):
        LabelledSegment("t", 0, 2, Instruction(0), confidence=1.5)
    traj = toy_traj(4)
    ds = Dataset([LabelledSegment("t", 0, 5, Instruction(0))], {"t": traj})
    with pytest.raises(ValueError):
        ds.validate()
    with pytest.raises(ValueError):
        Dataset([LabelledSegment("u", 0, 1, Instruction(0))], {"t": traj}).validate()
    with pytest.raises(ValueError):
        Dataset([LabelledSegment("t", 0, 1, Instruction(0))], {"t": traj}).validate(min_length=2)
    with pytest.raises(ValueError):
        Dataset(split_tag="5%")
