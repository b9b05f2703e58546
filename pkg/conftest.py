# conftest.py

import numpy as np
import pytest

from engine.nn_engine import ParamVector, init_params
from schemas.config_schemas import ArchSpec, RunConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale benchmark checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale benchmark checks (run with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    return ArchSpec(input_dim=6, hidden_widths=[5, 4], num_classes=3)


@pytest.fixture
def small_theta(small_arch, rng):
    return init_params(small_arch, rng)


def tiny_flat(workdir: str, **extra: str) -> dict:
    """A run small enough to go scenario -> train -> attack -> eval in seconds."""
    flat = {
        "master_seed": "7",
        "scenario.scenario_kind": "standard",
        "scenario.n_members": "30",
        "scenario.n_in_dist_nonmembers": "30",
        "scenario.n_test": "20",
        "scenario.input_dim": "16",
        "scenario.num_classes": "3",
        "scenario.class_separation": "3.0",
        "scenario.image_shaped": "true",
        "arch.hidden_widths": "16",
        "train.epochs": "300",
        "train.batch_size": "32",
        "train.target_loss": "0.01",
        "grad.block_size_target": "64",
        "solver.max_iters": "300",
        "io.workdir": workdir,
    }
    flat.update(extra)
    return flat


@pytest.fixture
def tiny_config(tmp_path):
    return RunConfig.from_flat(tiny_flat(str(tmp_path / "run"))).resolved()


@pytest.fixture
def identity_theta():
    """2-2-2 network whose weights are both the identity."""
    arch = ArchSpec(input_dim=2, hidden_widths=[2], num_classes=2)
    return arch, ParamVector.from_layers(arch, [np.eye(2), np.eye(2)])
