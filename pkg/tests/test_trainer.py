import json
import math
from dataclasses import replace

import numpy as np
import pytest

from irkd.backbone import ConfigError, ModelConfig, build_model, load_checkpoint
from irkd.losses import DistillConfig
from irkd.metrics import evaluate_arrays
from irkd.trainer import (
    AdamState,
    RunReport,
    SeedFailure,
    TrainConfig,
    adam_step,
    aggregate,
    best_alpha,
    distill_student,
    grid_search_alpha,
    multi_seed,
    run_name,
    select_epoch,
    train_baseline,
    train_teacher,
)

QUICK = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=0)


# -- Adam -------------------------------------------------------------------------


def test_adam_first_step_is_lr():
    w = np.array([0.0])
    adam_step([w], [np.array([1.0])], AdamState(), 1e-4)
    # bias-corrected m/sqrt(v) = 1 on the first step
    assert w[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_still_advances():
    w = np.array([0.7, -0.2])
    state = adam_step([w], [np.zeros(2)], AdamState(), 1e-2)
    np.testing.assert_array_equal(w, [0.7, -0.2])
    assert state.step == 1


def test_adam_quadratic_bowl():
    # Adam moves at most about lr per step, so lr=1e-4 cannot cover 0.5 in 5000 steps
    w = np.array([1.0])
    state = AdamState()
    for _ in range(5000):
        adam_step([w], [2 * w], state, 1e-3)
    assert abs(w[0]) < 0.5


def test_adam_step_size_bounded_by_lr():
    w = np.array([1.0])
    state = AdamState()
    for _ in range(5000):
        adam_step([w], [2 * w], state, 1e-4)
    assert 0.5 <= w[0] < 1.0


def test_adam_matches_hand_rolled_reference(rng):
    w = rng.normal(size=(3, 2))
    ref, m, v = w.copy(), np.zeros_like(w), np.zeros_like(w)
    state = AdamState()
    for t in range(1, 6):
        g = rng.normal(size=w.shape)
        adam_step([w], [g.copy()], state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(w, ref, rtol=1e-12)


def test_adam_nan_gradient_aborts_with_step():
    state = AdamState()
    adam_step([np.zeros(1)], [np.ones(1)], state, 0.1)
    with pytest.raises(FloatingPointError, match="step 2"):
        adam_step([np.zeros(1)], [np.array([np.nan])], state, 0.1)


# -- configs and names ----------------------------------------------------------------


@pytest.mark.parametrize("field,value", [("epochs", 0), ("batch_size", 0), ("learning_rate", -1.0), ("magnification", 3)])
def test_train_config_validation(field, value):
    with pytest.raises(ValueError):
        replace(QUICK, **{field: value}).validate()


def test_run_name_embeds_identity():
    cfg = replace(QUICK, seed=2, magnification=8, distill=DistillConfig(alpha_fm=1, alpha_at=0.1))
    assert run_name(cfg) == "student_seed2_mag8_fm1_at0.1_kd0_relu_minmax"
    assert run_name(QUICK) == "teacher_seed0_mag1"


def test_select_epoch_ties_go_earliest():
    assert select_epoch([0.1, 0.5, 0.5, 0.2]) == 1


# -- training runs --------------------------------------------------------------------


@pytest.fixture(scope="module")
def teacher_run(tiny_dataset, tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    return train_teacher(QUICK, tiny_config, tiny_dataset, out_dir=out), out


def test_teacher_artifacts(teacher_run, tiny_config):
    result, out = teacher_run
    name = result.report.name
    assert (out / f"{name}.ckpt").exists()
    lines = (out / f"{name}.losses.jsonl").read_text().splitlines()
    assert len(lines) == 2 * math.ceil(56 / 16)
    first = json.loads(lines[0])
    assert set(first) == {"step", "ce", "fm", "at", "kd", "total"} and first["step"] == 0
    report = RunReport.load(out / f"{name}.report.json")
    assert report == result.report
    assert load_checkpoint(out / f"{name}.ckpt").param_hash() == result.model.param_hash()


def test_report_selects_best_validation_epoch(teacher_run, tiny_dataset):
    report = teacher_run[0].report
    kappas = [e["val_kappa"] for e in report.epochs]
    assert report.selected_epoch == select_epoch(kappas)
    images, labels = tiny_dataset.arrays("test")
    res = evaluate_arrays(teacher_run[0].model, images, labels, 4)
    assert res["accuracy"] == report.test_accuracy


def test_teacher_determinism(teacher_run, tiny_config, tiny_dataset):
    again = train_teacher(QUICK, tiny_config, tiny_dataset)
    assert again.report == teacher_run[0].report
    assert again.model.param_hash() == teacher_run[0].model.param_hash()


def test_teacher_preconditions(tiny_config, tiny_dataset):
    with pytest.raises(ConfigError):
        train_teacher(replace(QUICK, magnification=2), tiny_config, tiny_dataset)
    with pytest.raises(ConfigError):
        train_teacher(replace(QUICK, distill=DistillConfig()), tiny_config, tiny_dataset)


def test_zero_learning_rate_keeps_initial_metrics(tiny_config, tiny_dataset):
    cfg = replace(QUICK, learning_rate=0.0, magnification=2)
    result = train_baseline(cfg, tiny_config, tiny_dataset)
    init = build_model(tiny_config, cfg.seed)
    from irkd.data import degrade

    images, labels = tiny_dataset.arrays("val")
    expected = evaluate_arrays(init, degrade(images, 2), labels, 4)
    for epoch in result.report.epochs:
        assert epoch["val_accuracy"] == expected["accuracy"]
        assert epoch["val_kappa"] == expected["kappa"]
    assert result.model.param_hash() == init.param_hash()


def test_all_zero_weights_reproduce_plain_student(teacher_run, tiny_config, tiny_dataset):
    cfg = replace(QUICK, magnification=4)
    plain = train_baseline(cfg, tiny_config, tiny_dataset, name="run")
    distilled = distill_student(teacher_run[0].model, replace(cfg, distill=DistillConfig()), tiny_dataset, name="run")
    assert plain.model.param_hash() == distilled.model.param_hash()
    assert plain.report.epochs == distilled.report.epochs
    assert plain.report.test_accuracy == distilled.report.test_accuracy


@pytest.mark.parametrize("distill", [
    DistillConfig(alpha_fm=1.0, alpha_at=1.0),
    DistillConfig(alpha_kd=1.0, alpha_fm=0.1),
    DistillConfig(alpha_fm=0.1, use_sr=True),
    DistillConfig(alpha_at=1.0, attention_mode="raw"),
])
def test_distillation_keeps_teacher_frozen(teacher_run, tiny_dataset, tmp_path, distill):
    teacher = teacher_run[0].model
    before = teacher.param_hash()
    cfg = replace(QUICK, epochs=1, magnification=8, distill=distill)
    result = distill_student(teacher, cfg, tiny_dataset, out_dir=tmp_path)
    assert teacher.param_hash() == before
    assert result.report.teacher_hash == before
    entries = [json.loads(line) for line in (tmp_path / f"{result.report.name}.losses.jsonl").read_text().splitlines()]
    if distill.alpha_fm:
        assert all(e["fm"] > 0 for e in entries)
    if distill.alpha_at:
        assert all(e["at"] > 0 for e in entries)


def test_distill_from_checkpoint_path(teacher_run, tiny_dataset):
    result, out = teacher_run
    cfg = replace(QUICK, epochs=1, magnification=2, distill=DistillConfig(alpha_fm=1.0))
    from_path = distill_student(out / f"{result.report.name}.ckpt", cfg, tiny_dataset)
    from_model = distill_student(result.model, cfg, tiny_dataset)
    assert from_path.report == from_model.report


def test_teacher_student_mismatch(teacher_run, tiny_dataset):
    cfg = replace(QUICK, epochs=1, distill=DistillConfig(alpha_fm=1.0))
    other = ModelConfig(block_channels=[4, 16], num_classes=4, input_size=32)
    with pytest.raises(ConfigError, match="channels"):
        distill_student(teacher_run[0].model, cfg, tiny_dataset, model_config=other)
    three = ModelConfig(block_channels=[4, 8], num_classes=3, input_size=32)
    with pytest.raises(ConfigError, match="classes"):
        distill_student(teacher_run[0].model, cfg, tiny_dataset, model_config=three)


# -- grid search and seeds --------------------------------------------------------------


def _fake(name, seed, kappa, acc=0.5, test_kappa=0.4):
    return RunReport(name=name, seed=seed, config={}, epochs=[{"val_kappa": kappa}], selected_epoch=0,
                     test_accuracy=acc, test_kappa=test_kappa)


def test_best_alpha_ties_to_smaller():
    reports = {0.0: _fake("a", 0, 0.3), 0.1: _fake("b", 0, 0.8), 10.0: _fake("c", 0, 0.8), 1.0: _fake("d", 0, 0.2)}
    assert best_alpha(reports) == 0.1


def test_grid_search_sequential_fm_then_at():
    calls = []
    table = {("alpha_fm", 0.0): 0.1, ("alpha_fm", 1.0): 0.6, ("alpha_fm", 10.0): 0.6,
             ("alpha_at", 0.0): 0.6, ("alpha_at", 1.0): 0.5, ("alpha_at", 10.0): 0.9}

    def runner(cfg):
        calls.append((cfg.distill.alpha_fm, cfg.distill.alpha_at))
        term = "alpha_fm" if len(calls) <= 3 else "alpha_at"
        value = getattr(cfg.distill, term)
        return _fake(f"r{len(calls)}", 0, table[(term, value)])

    best, history = grid_search_alpha(replace(QUICK, distill=DistillConfig()), [10, 1, 0], runner)
    assert best.distill.alpha_fm == 1.0 and best.distill.alpha_at == 10.0
    # the AT sweep runs with FM fixed at its best value
    assert calls[3:] == [(1.0, 0.0), (1.0, 1.0), (1.0, 10.0)]
    assert {t: len(h) for t, h in history.items()} == {"alpha_fm": 3, "alpha_at": 3}


def test_grid_search_zero_only_is_baseline(teacher_run, tiny_dataset, tiny_config):
    cfg = replace(QUICK, epochs=1, magnification=2, distill=DistillConfig())
    best, history = grid_search_alpha(
        cfg, [0], lambda c: distill_student(teacher_run[0].model, c, tiny_dataset, name="g").report)
    assert best.distill.is_plain
    plain = train_baseline(replace(cfg, distill=None), tiny_config, tiny_dataset, name="g")
    assert history["alpha_fm"][0.0].epochs == plain.report.epochs


def test_grid_search_rejects_empty():
    with pytest.raises(ValueError):
        grid_search_alpha(replace(QUICK, distill=DistillConfig()), [], lambda c: None)


def test_multi_seed_arithmetic():
    reports = {0: _fake("x", 0, 0.1, 0.6, 0.2), 1: _fake("x", 1, 0.1, 0.7, 0.4), 2: _fake("x", 2, 0.1, 0.9, 0.9)}
    agg = multi_seed(lambda s: reports[s], [0, 1, 2])
    assert agg.accuracy_mean == pytest.approx(2.2 / 3)
    assert agg.accuracy_std == pytest.approx(math.sqrt(((0.6 - 2.2 / 3) ** 2 + (0.7 - 2.2 / 3) ** 2 + (0.9 - 2.2 / 3) ** 2) / 2))
    assert agg.kappa_mean == pytest.approx(0.5)
    assert agg.kappa_std == pytest.approx(math.sqrt((0.09 + 0.01 + 0.16) / 2))


def test_multi_seed_single_and_identical():
    one = multi_seed(lambda s: _fake("x", s, 0.1, 0.8), [4])
    assert one.accuracy_mean == 0.8 and one.accuracy_std == 0.0
    same = aggregate([_fake("x", s, 0.1, 0.8) for s in range(3)])
    assert same.accuracy_std == 0.0 and same.kappa_std == 0.0


def test_multi_seed_names_failing_seed():
    def run(seed):
        if seed == 7:
            raise RuntimeError("boom")
        return _fake("x", seed, 0.1)

    with pytest.raises(SeedFailure, match="seed 7") as info:
        multi_seed(run, [1, 7, 9])
    assert info.value.seed == 7
