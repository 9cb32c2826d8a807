import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from msd.dataset import DatasetSpec, build_dataset, generate_sample
from msd.denoiser import ModelConfig, new_denoiser
from msd.diffusion import make_schedule
from msd.discriminator import DiscriminatorConfig, new_discriminator


@pytest.fixture(scope="session")
def small_data():
    return build_dataset(DatasetSpec(per_cell=4, length_range=(24, 32)))


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture
def tiny_prior(small_data):
    cfg = ModelConfig(layers=1, latent=16, ff=32, heads=2)
    return new_denoiser(small_data["train"], cfg, seed=0)


@pytest.fixture
def tiny_dis(small_data):
    cfg = DiscriminatorConfig(layers=1, latent=16, ff=32, heads=2)
    return new_discriminator(small_data["train"], cfg, seed=0)


@pytest.fixture
def walk_old():
    return generate_sample("walk", "old", 24, seed=5)


@pytest.fixture
def walk_neutral():
    return generate_sample("walk", "neutral", 24, seed=6)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance_line(request):
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
