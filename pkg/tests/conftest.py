import numpy as np
import pytest

from playseg.core import Dataset
from playseg.features import FeatureBank
from playseg.synthgym import DataConfig, GymConfig, generate_play_trajectory, make_datasets


@pytest.fixture(scope="session")
def records():
    return [generate_play_trajectory(100 + i, traj_id=f"rec-{i:02d}") for i in range(12)]


@pytest.fixture(scope="session")
def small_bundle():
    return make_datasets(DataConfig(seed=3, n_ann_records=24, n_unann_records=6, n_val_records=6))


@pytest.fixture(scope="session")
def bank():
    return FeatureBank()


@pytest.fixture(scope="session")
def small_scorer(small_bundle, bank):
    from playseg.scorer import ScorerConfig, train

    return train(small_bundle.splits["full"], ScorerConfig(hidden=32, epochs=8), bank)


def dataset_of(recs) -> Dataset:
    return Dataset([s for r in recs for s in r.segments()], {r.trajectory.id: r.trajectory for r in recs})


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def gym():
    return GymConfig()


# acceptance criteria record one line each here; printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
