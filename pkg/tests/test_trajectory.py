import numpy as np
import pytest

from tickettransfer.errors import BadMagicError, CheckpointError, ContractError, TruncatedError
from tickettransfer.pruning import PruneSchedule, apply_mask, full_masks, iterative_masks
from tickettransfer.trajectory import (MANIFEST, ResetMode, Trajectory, checkpoint_bytes,
                                       load_checkpoint, parse_checkpoint, reset, save_checkpoint)
from tickettransfer.zoo import InitDist, forward, init_params, micro_resnet


@pytest.fixture
def arch():
    return micro_resnet((1, 8, 8), 3)


def shifted(params, k):
    out = params.copy()
    for n in out:
        out[n] = out[n] + np.float32(1e-3 * k)
    return out


def three_step(arch, losses, root=None):
    p0 = init_params(arch, seed=0)
    traj = Trajectory(arch, root)
    for i, loss in enumerate(losses):
        traj.record(100 * i, shifted(p0, i), loss)
    return traj, p0


def test_best_is_argmin(arch):
    traj, p0 = three_step(arch, [2.3, 1.1, 1.4])
    step, best = traj.best_checkpoint()
    assert step == 100 and traj.best_index == 1
    assert best.bytes_equal(shifted(p0, 1))


def test_single_checkpoint_is_best(arch):
    traj, p0 = three_step(arch, [0.7])
    step, best = traj.best_checkpoint()
    assert step == 0 and best.bytes_equal(p0)


def test_tie_prefers_earliest(arch):
    traj, _ = three_step(arch, [2.0, 1.0, 1.0])
    assert traj.best_step == 100


def test_best_is_stable_under_worse_appends(arch):
    traj, p0 = three_step(arch, [2.0, 1.0])
    traj.record(300, shifted(p0, 9), 1.5).record(400, shifted(p0, 10), 1.0)
    assert traj.best_step == 100


def test_record_contract(arch):
    traj = Trajectory(arch)
    p = init_params(arch)
    with pytest.raises(CheckpointError):
        traj.record(5, p, 1.0)
    traj.record(0, p, 1.0)
    with pytest.raises(CheckpointError):
        traj.record(0, p, 1.0)
    with pytest.raises(ContractError):
        traj.record(10, p, float("nan"))
    with pytest.raises(CheckpointError):
        Trajectory(arch).best_checkpoint()


def test_disk_trajectory_round_trip(tmp_path, arch):
    traj, p0 = three_step(arch, [2.3, 1.1, 1.4], tmp_path)
    lines = (tmp_path / MANIFEST).read_text().splitlines()
    assert lines[1].split() == ["100", "1.1", "step_00000100.ltck"]
    reopened = Trajectory.open(tmp_path, arch)
    assert reopened.steps == [0, 100, 200] and reopened.best_step == 100
    assert reopened.theta0.bytes_equal(p0)
    assert reopened.params_at(200).bytes_equal(shifted(p0, 2))
    with pytest.raises(CheckpointError):
        reopened.params_at(50)


def test_missing_checkpoint_file(tmp_path, arch):
    three_step(arch, [1.0, 0.5], tmp_path)
    (tmp_path / "step_00000100.ltck").unlink()
    with pytest.raises(CheckpointError):
        Trajectory.open(tmp_path, arch).best_checkpoint()


# --------------------------------------------------------------------------- checkpoint files

def test_checkpoint_round_trip_is_byte_exact(tmp_path, arch):
    p = init_params(arch, seed=3)
    path = tmp_path / "c.ltck"
    save_checkpoint(p, path)
    back = load_checkpoint(path, arch)
    assert back.bytes_equal(p)
    assert checkpoint_bytes(back) == path.read_bytes()
    p64 = p.astype(np.float64)
    assert parse_checkpoint(checkpoint_bytes(p64))["conv0.weight"].dtype == np.float64


def test_checkpoint_layout():
    data = checkpoint_bytes({"w": np.array([1.5, -2.0], dtype=np.float32)})
    assert data == (b"LTCK" + b"\x01\x00" + b"\x01\x00\x00\x00" + b"\x01\x00w" + b"\x00"
                    + b"\x01" + b"\x02\x00\x00\x00" + np.array([1.5, -2.0], "<f4").tobytes())


def test_checkpoint_corruption(arch):
    data = checkpoint_bytes(init_params(arch))
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"LTCX" + data[4:])
    with pytest.raises(TruncatedError):
        parse_checkpoint(data[:-3])
    with pytest.raises(TruncatedError):
        parse_checkpoint(data[:3])


def test_checkpoint_architecture_mismatch(tmp_path, arch):
    path = tmp_path / "c.ltck"
    save_checkpoint(init_params(arch), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, micro_resnet((1, 8, 8), 4))


# --------------------------------------------------------------------------- resets

@pytest.fixture
def trained(arch):
    traj, p0 = three_step(arch, [2.0, 0.5, 0.9])
    masks = iterative_masks(traj.best_checkpoint()[1], PruneSchedule(rounds=3))[-1]
    return traj, p0, masks


def test_late_reset_gives_masked_best(arch, trained, rng):
    traj, _, masks = trained
    theta_s = traj.best_checkpoint()[1]
    x = rng.standard_normal((4, 1, 8, 8))
    a = forward(arch, reset(arch, traj, ResetMode("late"), masks), x, mode="eval").logits
    b = forward(arch, apply_mask(theta_s, masks), x, mode="eval").logits
    assert a.tobytes() == b.tobytes()


def test_ticket_with_full_mask_is_theta0(arch, trained):
    traj, p0, _ = trained
    assert reset(arch, traj, ResetMode("ticket"), full_masks(p0)).bytes_equal(p0)


def test_random_reset_determinism(arch, trained):
    traj, _, masks = trained
    a = reset(arch, traj, ResetMode("random", seed=5), masks)
    b = reset(arch, traj, ResetMode("random", seed=5), masks)
    c = reset(arch, traj, ResetMode("random", seed=6), masks)
    assert a.bytes_equal(b)
    assert not a.bytes_equal(c)
    assert a.bytes_equal(apply_mask(init_params(arch, InitDist(), 5), masks))


def test_non_prunable_tensors_come_unmasked_from_source(arch, trained):
    traj, p0, masks = trained
    out = reset(arch, traj, ResetMode("ticket"), masks)
    others = [n for n in p0 if n not in masks]
    assert out.bytes_equal(p0, others)
    for n, m in masks.items():
        assert not out[n][~m].any()


def test_reset_at_step(arch, trained):
    traj, p0, masks = trained
    out = reset(arch, traj, ResetMode("step", step=200), masks)
    assert out.bytes_equal(apply_mask(shifted(p0, 2), masks))
    with pytest.raises(CheckpointError):
        reset(arch, traj, ResetMode("step", step=150), masks)
    with pytest.raises(ContractError):
        ResetMode("warm")
