"""Run a seconds-scale transfer experiment and print the per-cell report.

    python demos/quick_transfer.py [out_dir]
"""
import sys

from tickettransfer.data import SyntheticSpec
from tickettransfer.harness import (ExperimentConfig, Hyperparams, TaskConfig, emit_report,
                                    read_rows, ticket_transfer)
from tickettransfer.pruning import PruneSchedule

out = sys.argv[1] if len(sys.argv) > 1 else "runs/quick"
cfg = ExperimentConfig(
    source=TaskConfig("src4", SyntheticSpec(4, (3, 12, 12), 30, 0.2)),
    target=TaskConfig("tgt3", SyntheticSpec(3, (1, 12, 12), 30, 0.2, first_motif=10), data_seed=1),
    schedule=PruneSchedule(rounds=6),
    levels=(2, 4, 6),
    reset=("late", "ticket", "random"),
    source_hyper=Hyperparams.stepped(0.05, 150, eval_interval=25),
    target_hyper=Hyperparams.stepped(0.05, 80, eval_interval=20),
    seeds=(0,),
)
result = ticket_transfer(cfg, out)
report, summary = emit_report(result, f"{out}/report.csv")
print(f"{'density':>8} {'mode':>7} {'k':>4} {'acc':>6} winning")
for row in read_rows(report):
    print(f"{float(row['density_prunable']):8.3f} {row['reset_mode']:>7} {row['best_step']:>4} "
          f"{float(row['test_accuracy']):6.3f} {row['is_winning_ticket']}")
print(f"wrote {report} and {summary}")
