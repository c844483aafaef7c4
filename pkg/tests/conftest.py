import os
from pathlib import Path

import numpy as np
import pytest

from styleless.evalkit import ExperimentConfig

# the scale used by the directional acceptance experiments
ACCEPT_CONFIG = ExperimentConfig()
BVS_SEEDS = (1, 2, 3, 4, 5)
ABLATION_SEEDS = (1, 2, 3)

_verdicts: list[str] = []


def record_verdict(line: str) -> None:
    _verdicts.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_trained_net():
    """A briefly trained stage-1 toyseg-v1 (64 scenes, 4 epochs)."""
    from styleless.data import make_dataset
    from styleless.model import ToySegNet
    from styleless.train import TrainConfig, train_stage1

    return train_stage1(ToySegNet(seed=0), TrainConfig(epochs=4, seed=0), make_dataset(64, 0)).net


@pytest.fixture(scope="session")
def experiment_dir(tmp_path_factory):
    """Where the acceptance experiments keep checkpoints and reports.

    Set STYLELESS_RUNS to reuse a previous run's checkpoints.
    """
    env = os.environ.get("STYLELESS_RUNS")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def bvs(experiment_dir):
    from styleless.evalkit import run_experiment
    return run_experiment("baseline-vs-styleless", BVS_SEEDS, ACCEPT_CONFIG, out=experiment_dir)


@pytest.fixture(scope="session")
def capacity(experiment_dir, bvs):
    from styleless.evalkit import run_experiment
    return run_experiment("capacity-ablation", ABLATION_SEEDS, ACCEPT_CONFIG, out=experiment_dir)


@pytest.fixture(scope="session")
def filters(experiment_dir, bvs):
    from styleless.evalkit import run_experiment
    return run_experiment("filters-ablation", ABLATION_SEEDS, ACCEPT_CONFIG, out=experiment_dir)
