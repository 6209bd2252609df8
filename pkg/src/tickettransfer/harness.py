"""Training loop, ticket-transfer pipeline, baselines and reports."""
from __future__ import annotations

import csv
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pruning
from .data import SyntheticSpec, TaskSpec, augment, load_dataset, split, synthetic_task
from .errors import ConfigError, ContractError, NumericError
from .numeric import make_rng
from .pruning import PruneSchedule
from .trajectory import ResetMode, Trajectory, reset
from .zoo import (Architecture, HeadSpec, InitDist, ParameterSet, evaluate, fc2, init_params,
                  logistic, preset, recalibrate_batchnorm, replace_head, value_and_grad,
                  with_input_shape)

log = logging.getLogger(__name__)

# Appendix-style step schedule: drops to 1/5 and 1/50 of the base rate
LR_DROPS = ((0.5, 0.2), (0.75, 0.02))


@dataclass
class Hyperparams:
    lr_schedule: tuple = ((0, 0.05),)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    total_steps: int = 400
    eval_interval: int = 50

    def __post_init__(self):
        self.lr_schedule = tuple((int(s), float(lr)) for s, lr in self.lr_schedule)
        starts = [s for s, _ in self.lr_schedule]
        if not self.lr_schedule or starts[0] != 0:
            raise ConfigError("lr_schedule must start at step 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("lr_schedule steps must increase")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.total_steps < 0 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive, total_steps >= 0")

    @classmethod
    def stepped(cls, base_lr: float, total_steps: int, **kw) -> "Hyperparams":
        """Constant ``base_lr`` with drops at 50% and 75% of ``total_steps``."""
        sched = [(0, base_lr)]
        for frac, mult in LR_DROPS:
            s = int(frac * total_steps)
            if s > sched[-1][0]:
                sched.append((s, base_lr * mult))
        return cls(tuple(sched), total_steps=total_steps, **kw)

    def lr_at(self, step: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if step >= start:
                lr = value
        return lr


@dataclass(frozen=True)
class FreezePolicy:
    kind: str = "none"  # none | freeze-conv

    def __post_init__(self):
        if self.kind not in ("none", "freeze-conv"):
            raise ConfigError(f"unknown freeze policy {self.kind!r}")

    def frozen_names(self, params: ParameterSet) -> frozenset:
        """Conv and batchnorm tensors (including running stats) outside the head."""
        if self.kind == "none":
            return frozenset()
        return frozenset(n for n, s in params.specs.items()
                         if not s.head and s.layer_kind in ("conv2d", "batchnorm"))


@dataclass
class TrainReport:
    best_step: int
    best_val_loss: float
    test_accuracy: float
    density: float
    steps_to_best: int
    wall_ms: int
    total_steps: int
    diverged: bool = False

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ContractError("accuracy must lie in [0, 1]")
        if self.best_step > self.total_steps:
            raise ContractError("best step exceeds the step budget")

    def comparable(self) -> dict:
        d = asdict(self)
        d.pop("wall_ms")
        return d


# --------------------------------------------------------------------------- training

def _batches(n: int, batch_size: int, seed: int):
    epoch = 0
    while True:
        perm = make_rng(seed, "batches", epoch).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
        if n < batch_size:
            yield perm
        epoch += 1


def train(arch: Architecture, params: ParameterSet, masks, freeze: FreezePolicy, task: TaskSpec,
          hyper: Hyperparams, seed: int = 0, root=None, augment_data=None):
    """SGD with momentum and weight decay on ``task``; returns ``(TrainReport, Trajectory)``.

    Masked weights are held at exactly zero (their gradient and momentum are
    zeroed and the weight is re-masked after every update).  Frozen tensors
    are never touched.  Validation loss is evaluated every ``eval_interval``
    steps and at the final step; the report describes the checkpoint with the
    lowest validation loss.
    """
    t0 = time.perf_counter()
    params = params.copy()
    masks = pruning.full_masks(params) if masks is None else masks
    params = pruning.apply_mask(params, masks)
    frozen = FreezePolicy(freeze).frozen_names(params) if isinstance(freeze, str) \
        else freeze.frozen_names(params)
    trainable = [n for n in params.trainable_names() if n not in frozen]
    velocity = {n: np.zeros_like(params[n]) for n in trainable}
    use_aug = task.augment if augment_data is None else augment_data
    traj = Trajectory(arch, root)
    traj.record(0, params, evaluate(arch, params, task.val.images, task.val.labels)[0])

    images, labels = task.train.images, task.train.labels
    batches = _batches(len(labels), hyper.batch_size, seed)
    diverged = False
    wd = params.dtype.type(hyper.weight_decay)
    mu = params.dtype.type(hyper.momentum)
    for step in range(1, hyper.total_steps + 1):
        idx = next(batches)
        xb = images[idx]
        if use_aug:
            xb = augment(xb, seed, "step", step)
        try:
            loss, grads, _ = value_and_grad(arch, params, xb, labels[idx], frozen)
        except NumericError:
            loss = float("nan")
        if not np.isfinite(loss):
            diverged = True
            log.warning("%s diverged at step %d", arch.name, step)
            break
        lr = params.dtype.type(hyper.lr_at(step - 1))
        for n in trainable:
            g = grads[n]
            if wd:
                g = g + wd * params[n]
            v = velocity[n]
            v *= mu
            v += g
            m = masks.get(n)
            if m is not None:
                np.copyto(v, 0, where=~m)
            params[n] -= lr * v
            if m is not None:
                np.copyto(params[n], 0, where=~m)
        if step % hyper.eval_interval == 0 or step == hyper.total_steps:
            val_loss = evaluate(arch, params, task.val.images, task.val.labels)[0]
            if not np.isfinite(val_loss):
                diverged = True
                break
            traj.record(step, params, val_loss)

    best_step, best = traj.best_checkpoint()
    _, acc = evaluate(arch, best, task.test.images, task.test.labels)
    report = TrainReport(
        best_step=best_step,
        best_val_loss=traj.checkpoints[traj.best_index].val_loss,
        test_accuracy=float(acc),
        density=pruning.density(masks, params, "whole") if masks else 1.0,
        steps_to_best=best_step,
        wall_ms=int((time.perf_counter() - t0) * 1000),
        total_steps=hyper.total_steps,
        diverged=diverged,
    )
    return report, traj


def baseline_run(kind: str, task: TaskSpec, hyper: Hyperparams, seed: int = 0, hidden: int = 96,
                 dist: InitDist = InitDist(), dtype=np.float32) -> TrainReport:
    """Train a flat-input logistic-regression or 2-layer classifier from scratch."""
    if kind == "logistic":
        arch = logistic(task.input_shape, task.num_classes)
    elif kind == "fc2":
        arch = fc2(task.input_shape, task.num_classes, hidden)
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    report, _ = train(arch, init_params(arch, dist, seed, dtype), None, FreezePolicy("none"), task,
                      hyper, seed)
    return report


# --------------------------------------------------------------------------- configuration

@dataclass
class TaskConfig:
    """Where a task's data comes from: a synthetic spec or an LTDS file prefix."""

    name: str
    synthetic: SyntheticSpec | None = None
    data_seed: int = 0
    path: str | None = None
    val_fraction: float = 0.2
    augment: bool = True

    def load(self) -> TaskSpec:
        if self.synthetic is not None:
            return synthetic_task(self.name, self.synthetic, self.data_seed, self.augment)
        if self.path is None:
            raise ConfigError(f"task {self.name}: give either synthetic or path")
        prefix = Path(self.path)
        train_ds = load_dataset(f"{prefix}.train.ltds", "train")
        val_path = Path(f"{prefix}.val.ltds")
        if val_path.exists():
            val_ds = load_dataset(val_path, "val")
        else:
            train_ds, val_ds = split(train_ds, self.val_fraction, self.data_seed)
        test_ds = load_dataset(f"{prefix}.test.ltds", "test")
        return TaskSpec(self.name, train_ds, val_ds, test_ds, train_ds.num_classes, self.augment)


@dataclass
class ExperimentConfig:
    arch: str = "micro-resnet"
    source: TaskConfig = field(default_factory=lambda: TaskConfig(
        "synth10", SyntheticSpec(10, (3, 16, 16), 100, 0.3)))
    target: TaskConfig = field(default_factory=lambda: TaskConfig(
        "synth5", SyntheticSpec(5, (1, 16, 16), 60, 0.3, test_per_class=200, first_motif=10),
        data_seed=1))
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    levels: tuple | None = None
    reset: tuple = ("late",)
    freeze: str = "none"
    head_spec: str = "linear"
    source_hyper: Hyperparams = field(default_factory=lambda: Hyperparams.stepped(0.05, 400))
    target_hyper: Hyperparams = field(
        default_factory=lambda: Hyperparams.stepped(0.05, 200, eval_interval=25))
    seeds: tuple = (0,)
    init: InitDist = field(default_factory=lambda: InitDist(residual_scale=0.0))
    bn_recalibrate: str = "source"  # none | source | target
    dtype: str = "float32"

    def __post_init__(self):
        self.reset = tuple(self.reset)
        self.seeds = tuple(int(s) for s in self.seeds)
        for mode in self.reset:
            ResetMode(mode)
        FreezePolicy(self.freeze)
        HeadSpec.parse(self.head_spec)
        if self.bn_recalibrate not in ("none", "source", "target"):
            raise ConfigError("bn_recalibrate must be none, source or target")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def random_reset_seed(seed: int) -> int:
    """Seed of the fresh draw used by ``random`` resets; distinct from the init seed."""
    return 1_000_003 + seed


# --------------------------------------------------------------------------- pipeline

@dataclass
class RunRecord:
    arch: str
    source: str
    target: str
    schedule_mode: str
    density_prunable: float
    density_whole: float
    reset_mode: str
    freeze: str
    seed: int
    report: TrainReport
    level: int = 0
    is_baseline: bool = False


@dataclass
class SourceRun:
    arch: Architecture
    trajectory: Trajectory
    report: TrainReport
    theta_s: ParameterSet


@dataclass
class ExperimentResult:
    records: list

    def baseline(self, seed: int) -> RunRecord:
        for r in self.records:
            if r.is_baseline and r.seed == seed:
                return r
        raise LookupError(f"no dense baseline for seed {seed}")

    def densities(self) -> list[float]:
        return sorted({r.density_prunable for r in self.records if not r.is_baseline}, reverse=True)

    def cells(self, density=None, mode=None, seed=None, tol=1e-9) -> list[RunRecord]:
        return [r for r in self.records if not r.is_baseline
                and (density is None or abs(r.density_prunable - density) <= tol)
                and (mode is None or r.reset_mode == mode)
                and (seed is None or r.seed == seed)]

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.records})


def _task_for(arch: Architecture, task: TaskSpec) -> TaskSpec:
    return task.with_channels(arch.input_shape[0]) if task.input_shape[0] != arch.input_shape[0] else task


def source_phase(config: ExperimentConfig, seed: int, source: TaskSpec | None = None,
                 root=None) -> SourceRun:
    """Step 1: train the dense network on the source task and keep its trajectory."""
    source = source or config.source.load()
    arch = preset(config.arch, source.input_shape, source.num_classes)
    theta0 = init_params(arch, config.init, seed, np.dtype(config.dtype))
    report, traj = train(arch, theta0, None, FreezePolicy("none"), source, config.source_hyper,
                         seed, root)
    _, theta_s = traj.best_checkpoint()
    log.info("seed %d source: best step %d, test acc %.4f", seed, report.best_step,
             report.test_accuracy)
    return SourceRun(arch, traj, report, theta_s)


def mask_levels(config: ExperimentConfig, theta_s: ParameterSet) -> list[tuple[int, dict]]:
    """Step 2: ``(level, masks)`` pairs ranked by the magnitudes of ``theta_s``."""
    sched = config.schedule
    full = pruning.full_masks(theta_s)
    if sched.mode == "iterative":
        all_masks = pruning.iterative_masks(theta_s, sched, full)
        levels = range(sched.rounds + 1) if config.levels is None else config.levels
        if any(not 0 <= int(k) <= sched.rounds for k in levels):
            raise ConfigError(f"levels must lie in 0..{sched.rounds} for {sched.rounds} rounds")
        return [(int(k), all_masks[int(k)]) for k in levels]
    kinds = tuple(k for k, r in sched.rates.items() if r > 0) or ("conv2d",)
    return [(i, pruning.one_shot_prune(theta_s, full, d, kinds))
            for i, d in enumerate(sched.target_densities)]


def target_phase(config: ExperimentConfig, src: SourceRun, seed: int,
                 target: TaskSpec | None = None, sink=None,
                 source: TaskSpec | None = None, baseline: bool = True) -> list[RunRecord]:
    """Step 3: dense baseline (unless ``baseline`` is false) plus every
    (density level, reset mode) cell.

    Before fine-tuning, each network's batchnorm running statistics are
    re-estimated on ``bn_recalibrate`` images (masking shifts every
    activation distribution, and frozen statistics would otherwise stay stale).
    """
    target = _task_for(src.arch, target or config.target.load())
    calib = None
    if config.bn_recalibrate == "source":
        calib = (source or config.source.load()).train.images
    elif config.bn_recalibrate == "target":
        calib = target.train.images
    body_arch = with_input_shape(src.arch, target.input_shape)
    head = HeadSpec.parse(config.head_spec)
    freeze = FreezePolicy(config.freeze)
    hyper = config.target_hyper
    common = dict(arch=config.arch, source=config.source.name, target=config.target.name,
                  freeze=config.freeze, seed=seed)

    def finetune(params, masks):
        if calib is not None:
            params = recalibrate_batchnorm(src.arch if calib.shape[1:] == src.arch.input_shape
                                           else body_arch, params, calib)
        arch_t, p = replace_head(body_arch, params, head, target.num_classes, seed, config.init)
        m = pruning.restrict_masks(masks, p)
        report, _ = train(arch_t, p, m, freeze, target, hyper, seed)
        return report, m, p

    records = []
    if baseline:
        report, m, p = finetune(src.theta_s, pruning.full_masks(src.theta_s))
        base = RunRecord(schedule_mode="dense", density_prunable=1.0,
                         density_whole=pruning.density(m, p, "whole"), reset_mode="late",
                         report=report, is_baseline=True, **common)
        records.append(base)
        if sink:
            sink(base)
    for level, masks in mask_levels(config, src.theta_s):
        for mode in config.reset:
            rmode = ResetMode(mode, seed=random_reset_seed(seed))
            params = reset(src.arch, src.trajectory, rmode, masks, config.init)
            report, m, p = finetune(params, masks)
            rec = RunRecord(schedule_mode=config.schedule.mode,
                            density_prunable=pruning.density(masks),
                            density_whole=pruning.density(m, p, "whole"), reset_mode=mode,
                            report=report, level=level, **common)
            records.append(rec)
            log.info("seed %d level %d %s: density %.4f acc %.4f", seed, level, mode,
                     rec.density_prunable, report.test_accuracy)
            if sink:
                sink(rec)
    return records


def _run_seed(config: ExperimentConfig, seed: int, out_dir=None) -> list[RunRecord]:
    root = Path(out_dir) / f"seed{seed}" if out_dir else None
    source = config.source.load()
    src = source_phase(config, seed, source, root=root / "source" if root else None)
    if root:
        for level, masks in mask_levels(config, src.theta_s):
            pruning.save_masks(masks, root / f"masks_level{level:02d}.ltmk")
    sink = None
    if root:
        partial = root / "cells.csv"
        partial.unlink(missing_ok=True)
        sink = lambda rec: _append_rows(partial, [rec], None)
    return target_phase(config, src, seed, sink=sink, source=source)


def ticket_transfer(config: ExperimentConfig, out_dir=None, workers: int = 1) -> ExperimentResult:
    """Run the three-step transfer pipeline for every configured seed."""
    if workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_seed, [config] * len(config.seeds), config.seeds,
                                   [out_dir] * len(config.seeds)))
    else:
        chunks = [_run_seed(config, s, out_dir) for s in config.seeds]
    return ExperimentResult([r for chunk in chunks for r in chunk])


def winning_ticket_test(result: ExperimentResult, density: float, mode: str, seed=None,
                        tol: float = 1e-9) -> bool:
    """``k' <= k`` and ``alpha' >= alpha`` against the dense baseline.

    With ``seed`` the comparison is per run; otherwise medians over seeds are
    compared.
    """
    cells = result.cells(density, mode, seed, tol)
    if not cells:
        raise LookupError(f"no cell at density {density} with mode {mode!r}")
    seeds = sorted({c.seed for c in cells})
    bases = [result.baseline(s) for s in seeds]
    steps = statistics.median(c.report.best_step for c in cells)
    acc = statistics.median(c.report.test_accuracy for c in cells)
    base_steps = statistics.median(b.report.best_step for b in bases)
    base_acc = statistics.median(b.report.test_accuracy for b in bases)
    return steps <= base_steps and acc >= base_acc


# --------------------------------------------------------------------------- reports

COLUMNS = ["arch", "source", "target", "schedule_mode", "density_prunable", "density_whole",
           "reset_mode", "freeze", "seed", "best_step", "best_val_loss", "test_accuracy",
           "is_winning_ticket", "wall_ms"]
SUMMARY_COLUMNS = ["arch", "source", "target", "schedule_mode", "density_prunable", "reset_mode",
                   "freeze", "n_seeds", "density_whole", "best_step", "best_val_loss",
                   "test_accuracy", "is_winning_ticket"]


def _row(rec: RunRecord, winning) -> dict:
    rep = rec.report
    return {
        "arch": rec.arch, "source": rec.source, "target": rec.target,
        "schedule_mode": rec.schedule_mode, "density_prunable": repr(float(rec.density_prunable)),
        "density_whole": repr(float(rec.density_whole)), "reset_mode": rec.reset_mode,
        "freeze": rec.freeze, "seed": rec.seed, "best_step": rep.best_step,
        "best_val_loss": repr(float(rep.best_val_loss)),
        "test_accuracy": repr(float(rep.test_accuracy)),
        "is_winning_ticket": "" if winning is None else str(bool(winning)),
        "wall_ms": rep.wall_ms,
    }


def _append_rows(path: Path, records, result):
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        if new:
            w.writeheader()
        for rec in records:
            w.writerow(_row(rec, None if result is None else _is_winning(result, rec)))


def _is_winning(result: ExperimentResult, rec: RunRecord) -> bool:
    if rec.is_baseline:
        return True
    return winning_ticket_test(result, rec.density_prunable, rec.reset_mode, rec.seed)


def emit_report(result: ExperimentResult, path) -> tuple[Path, Path]:
    """Write one CSV row per run plus ``<stem>_summary.csv`` with per-cell medians."""
    if not result.records:
        raise ContractError("nothing to report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        w.writeheader()
        for rec in result.records:
            w.writerow(_row(rec, _is_winning(result, rec)))
    summary = path.with_name(f"{path.stem}_summary.csv")
    write_summary(read_rows(path), summary)
    return path, summary


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_summary(rows: list[dict], path) -> None:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = tuple(row[c] for c in ("arch", "source", "target", "schedule_mode",
                                     "density_prunable", "reset_mode", "freeze"))
        groups.setdefault(key, []).append(row)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for key, members in groups.items():
            med = lambda col: statistics.median(float(r[col]) for r in members)
            wins = [r["is_winning_ticket"] == "True" for r in members if r["is_winning_ticket"]]
            w.writerow({
                **dict(zip(("arch", "source", "target", "schedule_mode", "density_prunable",
                            "reset_mode", "freeze"), key)),
                "n_seeds": len(members),
                "density_whole": repr(med("density_whole")),
                "best_step": repr(med("best_step")),
                "best_val_loss": repr(med("best_val_loss")),
                "test_accuracy": repr(med("test_accuracy")),
                "is_winning_ticket": repr(sum(wins) / len(wins)) if wins else "",
            })


def merge_reports(paths, out) -> Path:
    """Concatenate run CSVs (header once) and rebuild the summary."""
    rows = [row for p in paths for row in read_rows(p)]
    if not rows:
        raise ContractError("no rows to merge")
    out = Path(out)
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_summary(rows, out.with_name(f"{out.stem}_summary.csv"))
    return out
