import statistics
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from tickettransfer import pruning
from tickettransfer.data import SyntheticSpec, synthetic_task
from tickettransfer.errors import ConfigError, ContractError
from tickettransfer.harness import (COLUMNS, ExperimentResult, FreezePolicy, Hyperparams,
                                    RunRecord, TrainReport, baseline_run, emit_report,
                                    mask_levels, merge_reports, read_rows, source_phase,
                                    ticket_transfer, train, winning_ticket_test)
from tickettransfer.pruning import PruneSchedule
from tickettransfer.zoo import fc2, init_params, logistic, micro_resnet, preset


@pytest.fixture(scope="module")
def task8():
    return synthetic_task("t", SyntheticSpec(3, (1, 8, 8), 16, 0.1), 0)


# --------------------------------------------------------------------------- hyperparameters

def test_stepped_schedule():
    h = Hyperparams.stepped(0.05, 400)
    assert h.lr_schedule == ((0, 0.05), (200, 0.05 * 0.2), (300, 0.05 * 0.02))
    assert h.lr_at(0) == 0.05 and h.lr_at(199) == 0.05 and h.lr_at(200) == pytest.approx(0.01)
    assert h.lr_at(10_000) == pytest.approx(0.001)


def test_hyperparam_validation():
    for bad in (dict(lr_schedule=((5, 0.1),)), dict(lr_schedule=((0, 0.1), (0, 0.2))),
                dict(lr_schedule=((0, -0.1),)), dict(batch_size=0), dict(eval_interval=0)):
        with pytest.raises(ConfigError):
            Hyperparams(**bad)


def test_report_contract():
    with pytest.raises(ContractError):
        TrainReport(0, 1.0, 1.5, 1.0, 0, 0, 10)
    with pytest.raises(ContractError):
        TrainReport(11, 1.0, 0.5, 1.0, 11, 0, 10)


# --------------------------------------------------------------------------- train

def test_zero_steps_echo_initial_state(task8):
    arch = micro_resnet((1, 8, 8), 3)
    p = init_params(arch, seed=0)
    report, traj = train(arch, p, None, FreezePolicy(), task8, Hyperparams(total_steps=0))
    assert report.best_step == 0 and traj.steps == [0]
    assert traj.best_checkpoint()[1].bytes_equal(p)


def test_fc_small_fits_noise_free_two_class_task():
    task = synthetic_task("sep", SyntheticSpec(2, (1, 8, 8), 40, 0.0), 0)
    arch = preset("fc-small", (1, 8, 8), 2)
    report, traj = train(arch, init_params(arch, seed=0), None, FreezePolicy(), task,
                         Hyperparams.stepped(0.02, 2000, eval_interval=500))
    from tickettransfer.zoo import evaluate
    _, train_acc = evaluate(arch, traj.best_checkpoint()[1], task.train.images, task.train.labels)
    assert train_acc >= 0.99


def test_masked_coordinates_stay_exactly_zero(task8):
    arch = micro_resnet((1, 8, 8), 3)
    p = init_params(arch, seed=0)
    masks = pruning.iterative_masks(p, PruneSchedule(rounds=4))[-1]
    _, traj = train(arch, p, masks, FreezePolicy(), task8,
                    Hyperparams.stepped(0.1, 30, eval_interval=5))
    assert traj.steps == [0, 5, 10, 15, 20, 25, 30]
    for step in traj.steps:
        snap = traj.params_at(step)
        for n, m in masks.items():
            assert np.all(snap[n][~m] == 0)


def test_momentum_of_masked_coordinates_is_zero(task8, monkeypatch):
    import tickettransfer.harness as H
    arch = micro_resnet((1, 8, 8), 3)
    p = init_params(arch, seed=0)
    masks = pruning.iterative_masks(p, PruneSchedule(rounds=4))[-1]
    buffers = []
    real = np.zeros_like

    def capture(a, *args, **kw):
        out = real(a, *args, **kw)
        buffers.append(out)
        return out

    monkeypatch.setattr(H.np, "zeros_like", capture)
    train(arch, p, masks, FreezePolicy(), task8, Hyperparams.stepped(0.1, 10, eval_interval=5))
    monkeypatch.undo()
    for m in masks.values():
        same_shape = [b for b in buffers if b.shape == m.shape]
        assert any(np.all(b[~m] == 0) and b[m].any() for b in same_shape)


def test_freeze_conv_keeps_body_bytes(task8):
    arch = micro_resnet((1, 8, 8), 3)
    p = init_params(arch, seed=0)
    policy = FreezePolicy("freeze-conv")
    frozen = policy.frozen_names(p)
    assert "conv0.weight" in frozen and "bn0.running_var" in frozen
    assert not any(arch.specs[n].head for n in frozen)
    _, traj = train(arch, p, None, policy, task8, Hyperparams.stepped(0.1, 20, eval_interval=10))
    final = traj.params_at(20)
    assert final.bytes_equal(p, sorted(frozen))
    assert not final.bytes_equal(p, arch.head_names())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(task8):
    arch = micro_resnet((1, 8, 8), 3)
    report, _ = train(arch, init_params(arch, seed=0), None, FreezePolicy(), task8,
                      Hyperparams(((0, 1e6),), total_steps=20, eval_interval=5, momentum=0.0))
    assert report.diverged


def test_training_is_deterministic(task8):
    arch = micro_resnet((1, 8, 8), 3)
    h = Hyperparams.stepped(0.05, 12, eval_interval=4)
    a, ta = train(arch, init_params(arch, seed=1), None, FreezePolicy(), task8, h, seed=3)
    b, tb = train(arch, init_params(arch, seed=1), None, FreezePolicy(), task8, h, seed=3)
    assert a.comparable() == b.comparable()
    assert ta.params_at(12).bytes_equal(tb.params_at(12))


def test_augmentation_toggle(task8):
    arch = micro_resnet((1, 8, 8), 3)
    h = Hyperparams.stepped(0.05, 8, eval_interval=4)
    _, on = train(arch, init_params(arch, seed=1), None, FreezePolicy(), task8, h, augment_data=True)
    _, off = train(arch, init_params(arch, seed=1), None, FreezePolicy(), task8, h, augment_data=False)
    _, off2 = train(arch, init_params(arch, seed=1), None, FreezePolicy(), task8, h, augment_data=False)
    assert off.params_at(8).bytes_equal(off2.params_at(8))
    assert not on.params_at(8).bytes_equal(off.params_at(8))


# --------------------------------------------------------------------------- baselines

def test_logistic_separates_noise_free_task():
    task = synthetic_task("lin", SyntheticSpec(2, (1, 8, 8), 40, 0.0, jitter=0), 0,
                          augment=False)
    report = baseline_run("logistic", task, Hyperparams.stepped(0.05, 300, eval_interval=50))
    assert report.test_accuracy >= 0.99


def test_fc2_beats_logistic_on_nonlinear_task():
    # jittered motifs are not linearly separable from raw pixels
    task = synthetic_task("nl", SyntheticSpec(5, (1, 12, 12), 60, 0.3, jitter=3, first_motif=10,
                                              test_per_class=100), 1, augment=False)
    h = Hyperparams.stepped(0.02, 300, eval_interval=50)
    fc = [baseline_run("fc2", task, h, s).test_accuracy for s in range(5)]
    lg = [baseline_run("logistic", task, h, s).test_accuracy for s in range(5)]
    assert statistics.median(fc) >= statistics.median(lg)


def test_baseline_param_counts():
    assert fc2((1, 12, 12), 5, 30).param_count() == 144 * 30 + 30 + 30 * 5 + 5
    assert logistic((1, 12, 12), 5).param_count() == 144 * 5 + 5
    with pytest.raises(ConfigError):
        baseline_run("svm", None, Hyperparams())


# --------------------------------------------------------------------------- winning tickets

def record(density, mode, seed, step, acc, baseline=False):
    rep = TrainReport(step, 0.5, acc, density, step, 1, 1000)
    return RunRecord("a", "s", "t", "dense" if baseline else "iterative", density, density, mode,
                     "none", seed, rep, is_baseline=baseline)


def test_winning_ticket_examples():
    base = record(1.0, "late", 0, 400, 0.90, baseline=True)
    same = ExperimentResult([base, record(0.5, "late", 0, 400, 0.90)])
    assert winning_ticket_test(same, 0.5, "late")
    worse = ExperimentResult([base, record(0.5, "late", 0, 400, 0.899)])
    assert not winning_ticket_test(worse, 0.5, "late")
    better = ExperimentResult([base, record(0.5, "late", 0, 200, 0.92)])
    assert winning_ticket_test(better, 0.5, "late")
    slower = ExperimentResult([base, record(0.5, "late", 0, 600, 0.95)])
    assert not winning_ticket_test(slower, 0.5, "late")
    with pytest.raises(LookupError):
        winning_ticket_test(same, 0.3, "late")


def test_winning_ticket_over_seeds_uses_medians():
    recs = []
    for seed, (b, c) in enumerate([(0.90, 0.91), (0.90, 0.89), (0.90, 0.92)]):
        recs += [record(1.0, "late", seed, 100, b, True), record(0.5, "late", seed, 100, c)]
    result = ExperimentResult(recs)
    assert winning_ticket_test(result, 0.5, "late")
    assert not winning_ticket_test(result, 0.5, "late", seed=1)


# --------------------------------------------------------------------------- pipeline

@pytest.fixture(scope="module")
def tiny_result():
    cfg = tiny_config(reset=("late", "ticket", "random"), seeds=(0, 1))
    return cfg, ticket_transfer(cfg)


def test_grid_has_three_modes_per_density(tiny_result):
    cfg, result = tiny_result
    assert len(result.densities()) == 3
    for d in result.densities():
        for seed in (0, 1):
            assert sorted(r.reset_mode for r in result.cells(d, seed=seed)) == \
                ["late", "random", "ticket"]
    assert [r.seed for r in result.records if r.is_baseline] == [0, 1]


def test_report_rows_and_consistency(tiny_result, tmp_path):
    cfg, result = tiny_result
    path, summary = emit_report(result, tmp_path / "r.csv")
    rows = read_rows(path)
    assert list(rows[0]) == COLUMNS
    assert len(rows) == 3 * 3 * 2 + 2
    recs = {(r.seed, r.density_prunable, r.reset_mode, r.is_baseline): r for r in result.records}
    for row in rows:
        rec = recs[(int(row["seed"]), float(row["density_prunable"]), row["reset_mode"],
                    row["schedule_mode"] == "dense")]
        assert float(row["test_accuracy"]) == rec.report.test_accuracy
        assert float(row["best_val_loss"]) == rec.report.best_val_loss
        if not rec.is_baseline:
            expect = winning_ticket_test(result, rec.density_prunable, rec.reset_mode, rec.seed)
            assert row["is_winning_ticket"] == str(expect)
    srows = read_rows(summary)
    assert len(srows) == 3 * 3 + 1
    assert all(r["n_seeds"] == "2" for r in srows)


def test_merge_reports(tiny_result, tmp_path):
    _, result = tiny_result
    a, _ = emit_report(ExperimentResult([r for r in result.records if r.seed == 0]), tmp_path / "a.csv")
    b, _ = emit_report(ExperimentResult([r for r in result.records if r.seed == 1]), tmp_path / "b.csv")
    out = merge_reports([a, b], tmp_path / "m.csv")
    assert len(read_rows(out)) == len(result.records)
    assert (tmp_path / "m_summary.csv").exists()


def test_emit_report_rejects_empty(tmp_path):
    with pytest.raises(ContractError):
        emit_report(ExperimentResult([]), tmp_path / "x.csv")


def test_degenerate_schedule_matches_baseline():
    cfg = tiny_config(schedule=PruneSchedule(rounds=0))
    result = ticket_transfer(cfg)
    base = result.baseline(0)
    (cell,) = result.cells(1.0, "late", 0)
    assert cell.report.comparable() == base.report.comparable()


def test_twelve_rounds_reach_six_point_nine_percent():
    cfg = tiny_config(schedule=PruneSchedule(rounds=12), levels=(12,))
    arch = micro_resnet((3, 16, 16), 3)
    theta = init_params(arch, seed=0)
    ((level, masks),) = mask_levels(cfg, theta)
    assert level == 12
    assert pruning.density(masks) == pytest.approx(0.069, abs=0.001)


def test_one_shot_levels(tiny):
    cfg = replace(tiny, schedule=PruneSchedule(mode="one-shot", target_densities=(0.5, 0.21)))
    theta = init_params(micro_resnet((3, 8, 8), 3), seed=0)
    levels = mask_levels(cfg, theta)
    assert [round(pruning.density(m), 2) for _, m in levels] == [0.5, 0.21]


def test_partial_results_are_persisted(tmp_path, tiny):
    ticket_transfer(tiny, tmp_path)
    seed_dir = tmp_path / "seed0"
    rows = read_rows(seed_dir / "cells.csv")
    assert len(rows) == 1 + 3
    assert sorted(p.name for p in seed_dir.glob("*.ltmk")) == \
        ["masks_level00.ltmk", "masks_level01.ltmk", "masks_level02.ltmk"]
    assert (seed_dir / "source" / "manifest.txt").exists()


def test_source_phase_theta_s_is_best_checkpoint(tiny):
    src = source_phase(tiny, 0)
    assert src.trajectory.best_step == src.report.best_step
    assert src.theta_s.bytes_equal(src.trajectory.best_checkpoint()[1])


def test_workers_give_identical_results(tiny):
    cfg = replace(tiny, seeds=(0, 1))
    serial = ticket_transfer(cfg)
    parallel = ticket_transfer(cfg, workers=2)
    assert [r.report.comparable() for r in serial.records] == \
        [r.report.comparable() for r in parallel.records]


def test_config_validation():
    for bad in (dict(reset=("late", "warm")), dict(freeze="freeze-all"), dict(head_spec="conv"),
                dict(bn_recalibrate="always"), dict(seeds=()), dict(dtype="float16")):
        with pytest.raises((ConfigError, ContractError)):
            tiny_config(**bad)


def test_levels_beyond_rounds_are_rejected(tiny):
    theta = init_params(micro_resnet((3, 8, 8), 3), seed=0)
    with pytest.raises(ConfigError):
        mask_levels(replace(tiny, levels=(3,)), theta)
