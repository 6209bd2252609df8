"""Sparse-subnetwork transfer experiments on a small numpy network stack."""
from .data import Dataset, SyntheticSpec, TaskSpec, generate_synthetic, load_dataset, save_dataset
from .errors import (ConfigError, ContractError, FormatError, MaskError, NumericError,
                     TicketError)
from .harness import (ExperimentConfig, FreezePolicy, Hyperparams, TaskConfig, TrainReport,
                      baseline_run, emit_report, ticket_transfer, train, winning_ticket_test)
from .pruning import PruneSchedule, apply_mask, density, load_masks, save_masks
from .trajectory import ResetMode, Trajectory, load_checkpoint, reset, save_checkpoint
from .zoo import InitDist, init_params, preset

__version__ = "0.1.0"
