"""Print per-round survivors and densities of the iterative schedule on the micro-ResNet."""
from tickettransfer import pruning
from tickettransfer.pruning import PruneSchedule
from tickettransfer.zoo import init_params, micro_resnet

arch = micro_resnet((3, 16, 16), 10)
params = init_params(arch, seed=0)
masks = pruning.iterative_masks(params, PruneSchedule(rounds=13))
print(f"{'round':>5} {'prunable':>9} {'whole':>7} {'0.8^k':>7}")
for k, m in enumerate(masks):
    print(f"{k:5d} {pruning.density(m):9.4f} {pruning.density(m, params, 'whole'):7.4f} "
          f"{0.8 ** k:7.4f}")
