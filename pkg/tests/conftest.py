import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

warnings.filterwarnings("error", message=".*not writable.*")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


CONFIGS = Path(__file__).parents[1] / "configs"


# -- shared toy problem ----------------------------------------------------------

from misleader.data import SplitSpec, gen_gaussian_mixture, split  # noqa: E402
from misleader.models import ArchitectureSpec  # noqa: E402
from misleader.pipeline import train_target  # noqa: E402


def make_toy(seed: int = 0, n: int = 2000, std: float = 0.8):
    ds = gen_gaussian_mixture(seed, n, 4, 2, 4.0, std)
    return split(ds, SplitSpec(0.8, seed))


def make_target(train, seed: int = 0, epochs: int = 50):
    spec = ArchitectureSpec.mlp(train.input_shape, [64, 64], train.num_classes)
    return train_target(train, spec, epochs, 0.05, 0.9, 64, seed, seed + 1)


@pytest.fixture(scope="session")
def toy():
    train, test = make_toy(0)
    return train, test, make_target(train, 0)


@pytest.fixture(scope="session")
def small_toy():
    train, test = make_toy(1, n=240)
    return train, test, make_target(train, 1, epochs=20)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
