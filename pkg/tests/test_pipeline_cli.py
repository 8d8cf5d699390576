import json
from pathlib import Path

import pytest
import yaml

from playseg import cli
from playseg.config import from_dict
from playseg.metrics import f1
from playseg.nn import DivergenceError
from playseg.pipeline import STAGE_ORDER, MissingArtifact, Pipeline
from playseg.report import report_from_run_dir

TINY = {
    "data": {"n_ann_records": 30, "n_unann_records": 10, "n_val_records": 5},
    "scorer": {"epochs": 3},
    "baselines": {"epochs": 3},
    "policy": {"seeds": [0, 1], "episodes": 64, "epochs": 3},
}


def _stamp(run_dir: Path) -> dict:
    return {d.name: (d / "stage.json").stat().st_mtime_ns for d in (run_dir / "stages").iterdir()}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("tiny")
    p = Pipeline(from_dict(TINY), run_dir)
    p.run_all()
    return run_dir


def test_run_all_produces_report(tiny_run):
    summary = json.loads((tiny_run / "report" / "summary.json").read_text())
    assert summary["missing"] == []
    assert set(summary["policy"]["table"]) == set(from_dict(TINY).augment.conditions)
    for fig in summary["figures"]:
        assert (tiny_run / "report" / fig).exists()
    for name in STAGE_ORDER:
        assert Pipeline(from_dict(TINY), tiny_run).done(name)


def test_rerun_skips_everything(tiny_run):
    before = _stamp(tiny_run)
    report = (tiny_run / "report" / "summary.json").read_bytes()
    Pipeline(from_dict(TINY), tiny_run).run_all()
    assert _stamp(tiny_run) == before
    assert (tiny_run / "report" / "summary.json").read_bytes() == report


def test_policy_seed_change_invalidates_downstream_only(tiny_run):
    a = Pipeline(from_dict(TINY), tiny_run)
    b = Pipeline(from_dict({**TINY, "policy": {**TINY["policy"], "seeds": [0, 2]}}), tiny_run)
    changed = {n for n in STAGE_ORDER if a.key(n) != b.key(n)}
    assert changed == {"train-policy", "eval-policy", "report"}


def test_scorer_change_keeps_data_and_baselines(tiny_run):
    a = Pipeline(from_dict(TINY), tiny_run)
    b = Pipeline(from_dict({**TINY, "scorer": {"epochs": 4}}), tiny_run)
    same = {n for n in STAGE_ORDER if a.key(n) == b.key(n)}
    assert {"generate", "split", "train-baselines", "extract-framecrop", "extract-boundarycrop"} <= same
    assert "train-scorer" not in same and "extract-ps" not in same


def test_report_f1_matches_its_table(tiny_run):
    summary = json.loads((tiny_run / "report" / "summary.json").read_text())
    b = summary["segmentation_quality"]["ps"]["boundaries"]
    for row in b.values():
        assert row["f1"] == pytest.approx(f1(row["precision"], row["recall"]), abs=1e-5)


def test_worker_count_does_not_change_results(tiny_run, tmp_path):
    Pipeline(from_dict(TINY), tmp_path, workers=2).run_all()
    for f in sorted((tiny_run / "report").iterdir()):
        assert (tmp_path / "report" / f.name).read_bytes() == f.read_bytes(), f.name


def test_report_idempotent(tiny_run, tmp_path):
    report_from_run_dir(tiny_run, tmp_path / "r1")
    report_from_run_dir(tiny_run, tmp_path / "r2")
    names = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "r2").iterdir())
    for n in names:
        assert (tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes()


def test_empty_run_dir_report(tmp_path):
    summary = report_from_run_dir(tmp_path / "nothing", tmp_path / "out")
    assert summary["missing"]
    assert summary["policy"] == {"missing": True}
    assert summary["scorer"] == {"missing": True}
    assert (tmp_path / "out" / "summary.json").exists()


def test_missing_upstream(tmp_path):
    p = Pipeline(from_dict(TINY), tmp_path)
    with pytest.raises(MissingArtifact):
        p.run_stage("train-scorer")


def test_interrupted_stage_leaves_no_marker(tmp_path, monkeypatch):
    from playseg import pipeline

    p = Pipeline(from_dict(TINY), tmp_path)
    p.run_stage("generate")

    def boom(p, out):
        (out / "partial.txt").write_text("x")
        raise RuntimeError("interrupted")

    monkeypatch.setitem(pipeline.STAGES, "split", pipeline.StageSpec("split", ("generate",),
                                                                    pipeline.STAGES["split"].config, boom))
    with pytest.raises(RuntimeError):
        p.run_stage("split")
    assert not p.done("split")
    monkeypatch.undo()
    assert Pipeline(from_dict(TINY), tmp_path).run_stage("split").exists()


# -- command line

def _write_cfg(tmp_path, raw) -> Path:
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_cli_config_prints_defaults(capsys):
    assert cli.main(["config"]) == 0
    assert "policy:" in capsys.readouterr().out


def test_cli_bad_config_exit_2(tmp_path):
    assert cli.main(["generate", "--config", str(_write_cfg(tmp_path, {"data": {"bogus": 1}})),
                     "--run-dir", str(tmp_path / "r")]) == 2


def test_cli_bad_workers_env_exit_2(tmp_path, monkeypatch):
    monkeypatch.setenv("PLAYSEG_WORKERS", "lots")
    assert cli.main(["generate", "--run-dir", str(tmp_path / "r")]) == 2


def test_cli_missing_upstream_exit_3(tmp_path):
    assert cli.main(["train-scorer", "--config", str(_write_cfg(tmp_path, TINY)),
                     "--run-dir", str(tmp_path / "r")]) == 3


def test_cli_missing_checkpoint_exit_3(tmp_path):
    assert cli.main(["segment", "--checkpoint", str(tmp_path / "none"), "--trajectories", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 3


def test_cli_divergence_exit_4(monkeypatch):
    def diverge(args):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(cli, "dispatch", diverge)
    assert cli.main(["config"]) == 4


def _scorer_ckpt(run_dir: Path) -> Path:
    return next((run_dir / "stages").glob("train-scorer-*")) / "scorer.json"


def _unann_dir(run_dir: Path) -> Path:
    return next((run_dir / "stages").glob("generate-*")) / "unannotated"


def test_cli_segment_writes_outputs(tiny_run, tmp_path, capsys):
    out = tmp_path / "seg"
    code = cli.main(["segment", "--checkpoint", str(_scorer_ckpt(tiny_run)), "--trajectories",
                     str(_unann_dir(tiny_run)), "--out", str(out)])
    assert code in (0, 5)
    rows = [json.loads(l) for l in (out / "segments.jsonl").read_text().splitlines()]
    assert rows and all(r["method"] == "ps" for r in rows)
    assert len((out / "log.jsonl").read_text().splitlines()) == 10


def test_cli_segment_infeasible_exit_5(tiny_run, tmp_path):
    # one fixed length cannot tile windows of arbitrary length
    code = cli.main(["segment", "--checkpoint", str(_scorer_ckpt(tiny_run)), "--trajectories",
                     str(_unann_dir(tiny_run)), "--out", str(tmp_path / "seg"), "--minlen", "31",
                     "--maxlen", "31"])
    assert code == 5
    assert (tmp_path / "seg" / "log.jsonl").exists()


def test_cli_stage_resolves_from_run_dir(tiny_run, capsys, monkeypatch):
    monkeypatch.setenv("PLAYSEG_RUN_DIR", str(tiny_run))
    assert cli.main(["report"]) == 0
    assert "report-" in capsys.readouterr().out


def test_cli_selftest_passes(capsys):
    assert cli.main(["selftest", "--cases", "20"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 4 and all(line.startswith("PASS") for line in out)
