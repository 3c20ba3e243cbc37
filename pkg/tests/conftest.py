import numpy as np
import pytest

from mpae.harness import ExperimentConfig
from mpae.model import ModelConfig, TrainConfig
from mpae.representation import SDF, SHARP
from mpae.store import RunStore
from mpae.synthgen import SynthConfig, generate_dataset
from mpae.volume import PhaseMask


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="run slow acceptance tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def sphere_mask():
    def make(n: int = 16, radius: float = 4.0, center: tuple | None = None) -> PhaseMask:
        c = np.full(3, n / 2) if center is None else np.asarray(center, dtype=float)
        idx = np.indices((n, n, n)) + 0.5
        dist = np.sqrt(sum((idx[i] - c[i]) ** 2 for i in range(3)))
        return PhaseMask(dist <= radius)

    return make


@pytest.fixture
def synthetic_dataset(tmp_path):
    """20 SDF samples on an 8^3 grid (16 train / 3 test / 1 val)."""
    return generate_dataset(SynthConfig(mu=1.0, grid=8, seed=0), 20, tmp_path / "toy")


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(levels=1, latent_channels=2, base_channels=4, groups=2)


@pytest.fixture
def experiment(tmp_path, synthetic_dataset, tiny_model_config) -> ExperimentConfig:
    return ExperimentConfig(
        datasets={"toy": synthetic_dataset.root / "manifest.json"},
        representations=[SDF, SHARP],
        model=tiny_model_config,
        train=TrainConfig(lr=1e-3, epochs=1, batch_size=8),
        seeds=[0, 1],
        output=tmp_path / "out",
        epochs_ingested=None,
    )


@pytest.fixture
def run_store(tmp_path) -> RunStore:
    return RunStore(tmp_path / "runs")


@pytest.fixture
def empty() -> None:
    """Test against the plain Python dict implementation"""
    return None
