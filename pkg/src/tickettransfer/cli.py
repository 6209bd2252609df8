"""Command-line entry point: ``tickettransfer <subcommand> ...``.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pruning
from .config import _shape, format_config, load_config
from .data import SyntheticSpec, generate_synthetic, save_dataset
from .errors import (CheckpointError, ConfigError, DivergenceError, FormatError, NumericError,
                     TicketError)
from .harness import (COLUMNS, ExperimentConfig, baseline_run, emit_report, merge_reports,
                      read_rows, source_phase, ticket_transfer)
from .pruning import PruneSchedule
from .trajectory import MANIFEST, checkpoint_bytes, load_checkpoint, parse_checkpoint
from .zoo import preset

log = logging.getLogger("tickettransfer")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.f64:
        cfg = replace(cfg, dtype="float64")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(label: str, report) -> None:
    print(f"{label}: best_step={report.best_step} best_val_loss={report.best_val_loss!r} "
          f"test_accuracy={report.test_accuracy!r} density={report.density!r} "
          f"wall_ms={report.wall_ms}{' DIVERGED' if report.diverged else ''}")


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    diverged = False
    for seed in cfg.seeds:
        src = source_phase(cfg, seed, root=out / f"seed{seed}" / "source")
        _print_report(f"seed {seed}", src.report)
        diverged |= src.report.diverged
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    (out / "config.ini").write_text(format_config(cfg), encoding="utf-8")
    result = ticket_transfer(cfg, out, workers=args.workers)
    report, summary = emit_report(result, out / "report.csv")
    print(f"wrote {report} and {summary} ({len(result.records)} runs)")
    return EXIT_DIVERGED if any(r.report.diverged for r in result.records) else EXIT_OK


def cmd_prune(args) -> int:
    arch = preset(args.arch, _shape(args.input_shape), args.num_classes)
    params = load_checkpoint(args.checkpoint, arch)
    if args.one_shot is not None:
        masks = pruning.one_shot_prune(params, pruning.full_masks(params), args.one_shot)
    else:
        sched = PruneSchedule(rates={"conv2d": args.rate, "dense": args.dense_rate},
                              rounds=args.rounds, scope=args.scope)
        masks = pruning.iterative_masks(params, sched)[-1]
    pruning.save_masks(masks, args.out)
    print(f"wrote {args.out}: prunable density {pruning.density(masks)!r}, "
          f"whole-model density {pruning.density(masks, params, 'whole')!r}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load(args)
    target = cfg.target.load()
    diverged = False
    for seed in cfg.seeds:
        report = baseline_run(args.kind, target, cfg.target_hyper, seed, args.hidden,
                              dtype=np.dtype(cfg.dtype))
        _print_report(f"{args.kind} seed {seed}", report)
        diverged |= report.diverged
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_report(args) -> int:
    out = merge_reports(args.inputs, args.out)
    print(f"merged {len(args.inputs)} files into {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(args.num_classes, _shape(args.shape), args.samples_per_class, args.noise,
                         args.test_per_class, args.val_fraction, args.first_motif, args.jitter)
    seed = args.seed if args.seed is not None else 0
    prefix = Path(args.out_dir) / args.name
    for ds in generate_synthetic(spec, seed):
        path = Path(f"{prefix}.{ds.split}.ltds")
        save_dataset(ds, path)
        print(f"wrote {path} ({len(ds)} samples)")
    return EXIT_OK


# --------------------------------------------------------------------------- verify

def _verify_trajectory(root: Path, problems: list) -> None:
    steps = []
    for line in (root / MANIFEST).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        step, loss, key = line.split()
        steps.append(int(step))
        if not np.isfinite(float(loss)):
            problems.append(f"{root}: non-finite validation loss at step {step}")
        data = (root / key).read_bytes()
        if checkpoint_bytes(parse_checkpoint(data)) != data:
            problems.append(f"{root / key}: checkpoint does not re-serialise byte-exactly")
    if not steps or steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:])):
        problems.append(f"{root}: manifest steps must start at 0 and increase")


def _verify_masks(paths: list, problems: list) -> None:
    prev = None
    for path in sorted(paths):
        masks = pruning.load_masks(path)
        if prev is not None:
            if set(prev) != set(masks):
                problems.append(f"{path}: tensor names differ from the previous level")
            elif any(np.any(masks[n] & ~prev[n]) for n in masks):
                problems.append(f"{path}: revives weights pruned at an earlier level")
        prev = masks


def _verify_report(path: Path, problems: list) -> None:
    rows = read_rows(path)
    if not rows or list(rows[0]) != COLUMNS:
        problems.append(f"{path}: unexpected columns")
        return
    baselines = {(r["seed"], r["target"], r["freeze"]): r for r in rows
                 if r["schedule_mode"] == "dense"}
    for r in rows:
        if r["schedule_mode"] == "dense":
            continue
        base = baselines.get((r["seed"], r["target"], r["freeze"]))
        if base is None:
            problems.append(f"{path}: no dense baseline for seed {r['seed']}")
            continue
        expect = (int(r["best_step"]) <= int(base["best_step"])
                  and float(r["test_accuracy"]) >= float(base["test_accuracy"]))
        if str(expect) != r["is_winning_ticket"]:
            problems.append(f"{path}: is_winning_ticket inconsistent for seed {r['seed']} "
                            f"density {r['density_prunable']} mode {r['reset_mode']}")
        if not 0.0 <= float(r["test_accuracy"]) <= 1.0:
            problems.append(f"{path}: accuracy out of range")


def cmd_verify(args) -> int:
    root = Path(args.out_dir)
    if not root.is_dir():
        raise OSError(f"{root} is not a directory")
    problems: list[str] = []
    checked = 0
    jobs = [(_verify_trajectory, m.parent, m.parent) for m in sorted(root.rglob(MANIFEST))]
    jobs += [(_verify_masks, list(d.glob("masks_level*.ltmk")), d)
             for d in sorted({p.parent for p in root.rglob("*.ltmk")})]
    jobs += [(_verify_report, r, r) for r in sorted(root.rglob("report.csv"))]
    for check, arg, where in jobs:
        # a corrupt artifact is a failed verification, not an I/O failure of the tool
        try:
            check(arg, problems)
        except (FormatError, CheckpointError, OSError, ValueError, KeyError) as exc:
            problems.append(f"{where}: {exc}")
        checked += 1
    for p in problems:
        print(f"FAIL {p}")
    print(f"verified {checked} artifact groups under {root}: {len(problems)} problem(s)")
    return EXIT_VERIFY if problems or not checked else EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seeds")
    common.add_argument("--out-dir", default="runs", help="directory for artifacts")
    common.add_argument("--workers", type=int, default=1, help="parallel seeds (processes)")
    common.add_argument("--f64", action="store_true", help="train in float64")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tickettransfer",
                                     description="Transfer sparse subnetworks between tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the dense source network")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", parents=[common], help="run the full transfer pipeline")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("prune", parents=[common], help="compute masks from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", default="micro-resnet")
    p.add_argument("--input-shape", default="3x16x16")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--dense-rate", type=float, default=0.0)
    p.add_argument("--scope", choices=("layer", "global"), default="layer")
    p.add_argument("--one-shot", type=float, default=None, metavar="DENSITY")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("baseline", parents=[common], help="train a flat classifier on the target")
    p.add_argument("--config")
    p.add_argument("--kind", choices=("logistic", "fc2"), default="fc2")
    p.add_argument("--hidden", type=int, default=96)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", parents=[common], help="merge report CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic LTDS dataset")
    p.add_argument("--name", default="synth")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--shape", default="3x16x16")
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--first-motif", type=int, default=0)
    p.add_argument("--jitter", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("verify", parents=[common], help="check invariants of stored artifacts")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TicketError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
