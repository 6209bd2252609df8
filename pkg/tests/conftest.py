import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tickettransfer.data import SyntheticSpec
from tickettransfer.harness import ExperimentConfig, Hyperparams, TaskConfig
from tickettransfer.pruning import PruneSchedule

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**overrides) -> ExperimentConfig:
    """A seconds-scale transfer experiment on 8x8 images."""
    kw = dict(
        source=TaskConfig("src3", SyntheticSpec(3, (3, 8, 8), 12, 0.1)),
        target=TaskConfig("tgt2", SyntheticSpec(2, (1, 8, 8), 12, 0.1, first_motif=3), data_seed=1),
        schedule=PruneSchedule(rounds=2),
        source_hyper=Hyperparams.stepped(0.05, 12, eval_interval=4),
        target_hyper=Hyperparams.stepped(0.02, 8, eval_interval=4),
        seeds=(0,),
    )
    kw.update(overrides)
    return ExperimentConfig(**kw)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
