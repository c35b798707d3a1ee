import json

import pytest

from irkd.experiments import DeskExperiment, DeskSetup

TINY = DeskSetup(per_class=10, block_channels=[4, 8], epochs=1, batch_size=16, seeds=(0, 1))


@pytest.fixture(scope="module")
def tiny_desk(tmp_path_factory):
    return DeskExperiment(TINY, tmp_path_factory.mktemp("desk"))


def test_factor_one_baseline_is_the_teacher(tiny_desk):
    assert tiny_desk.baseline(0, 1) is tiny_desk.teacher(0)


def test_runs_are_memoised_and_saved(tiny_desk):
    first = tiny_desk.distill(0, 8, TINY.fm_at())
    assert tiny_desk.distill(0, 8, TINY.fm_at()) is first
    assert (tiny_desk.root / "runs" / first.report.name / "report.json").exists()
    assert (tiny_desk.root / "runs" / first.report.name / "model.ckpt").exists()


def test_studies_have_one_entry_per_seed(tiny_desk):
    assert set(tiny_desk.resolution_ladder()) == {1, 2, 4, 8}
    assert all(len(v) == 2 for v in tiny_desk.resolution_ladder().values())
    assert set(tiny_desk.mode_ablation()) == {"relu_minmax", "raw", "minmax"}
    assert len(tiny_desk.distillation_gain()["fm_at"]) == 2
    assert tiny_desk.pipeline_seconds() > 0


def test_method_table_reports(tiny_desk):
    reports = tiny_desk.method_table(factors=(8,))
    # teachers, then baseline plus six presets per seed
    assert len(reports) == 2 + 2 * 7
    assert len({r.name for r in reports}) == len(reports)


def test_teacher_invariance_covers_distillation_runs(tiny_desk):
    tiny_desk.distill(1, 4, TINY.methods()["KD"])
    checks = tiny_desk.teacher_invariance()
    assert checks and all(checks.values())
    assert all("student" in k for k in checks)


def test_summary_and_dataset_reuse(tiny_desk):
    summary = json.loads(tiny_desk.save_summary().read_text())
    assert summary["setup"]["epochs"] == 1 and summary["runs"]
    again = DeskExperiment(TINY, tiny_desk.root)
    assert again.data.records == tiny_desk.data.records
