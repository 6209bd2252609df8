"""Train a small source network, prune it, and compare the three reset modes layer by layer."""
import numpy as np

from tickettransfer import pruning
from tickettransfer.data import SyntheticSpec, synthetic_task
from tickettransfer.harness import FreezePolicy, Hyperparams, train
from tickettransfer.pruning import PruneSchedule
from tickettransfer.trajectory import ResetMode, reset
from tickettransfer.zoo import init_params, micro_resnet

task = synthetic_task("src", SyntheticSpec(4, (3, 12, 12), 30, 0.2), 0)
arch = micro_resnet((3, 12, 12), 4)
report, traj = train(arch, init_params(arch, seed=0), None, FreezePolicy(), task,
                     Hyperparams.stepped(0.05, 120, eval_interval=20))
print(f"source: best step {report.best_step}, test accuracy {report.test_accuracy:.3f}")
masks = pruning.iterative_masks(traj.best_checkpoint()[1], PruneSchedule(rounds=5))[-1]
nets = {m: reset(arch, traj, ResetMode(m, seed=99), masks) for m in ("late", "ticket", "random")}
print(f"{'tensor':<22} {'kept':>6} " + " ".join(f"{m:>8}" for m in nets))
for name, m in masks.items():
    norms = " ".join(f"{float(np.linalg.norm(p[name])):8.3f}" for p in nets.values())
    print(f"{name:<22} {m.mean():6.3f} {norms}")
