from pathlib import Path

import numpy as np
import pytest
import toml

from uncert_snn.backbone import HeadWeights, ModelConfig, SpikingTransformer, StageConfig
from uncert_snn.class_engine_config import DEFAULT_SETTINGS, validate_settings
from uncert_snn.sweep import prepare_experiment
from uncert_snn.tensor_core import DenseTensor, quantize_to_grid

CONFIG_DIR = Path(__file__).parent / "config"
TINY_SWEEP = CONFIG_DIR / "tiny_sweep.toml"


def tiny_settings_dict() -> dict:
    return validate_settings({**DEFAULT_SETTINGS, **toml.load(TINY_SWEEP)})


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_settings():
    return tiny_settings_dict()


@pytest.fixture(scope="session")
def tiny_experiment():
    """Dataset, model and fitted head of the tiny config; shared read-only across tests."""
    return prepare_experiment(tiny_settings_dict(), seed=0)


@pytest.fixture(scope="session")
def tiny_experiments():
    settings = tiny_settings_dict()
    return {seed: prepare_experiment(settings, seed=seed) for seed in settings["seeds"]}


@pytest.fixture
def tiny_config():
    return ModelConfig(
        steps=3,
        stages=(StageConfig(8, 1, 1), StageConfig(16, 2, 1)),
        num_classes=3,
        seed=3,
        in_channels=2,
        image_size=4,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return SpikingTransformer.build(tiny_config)


@pytest.fixture
def make_head(rng):
    def make(dim: int, classes: int) -> HeadWeights:
        return HeadWeights(
            w=DenseTensor(quantize_to_grid(rng.normal(size=(dim, classes)))),
            b=DenseTensor(quantize_to_grid(rng.normal(scale=0.1, size=classes))),
        )

    return make


@pytest.fixture
def tiny_model_with_head(tiny_model, make_head):
    return tiny_model.with_head(make_head(16, 3))


@pytest.fixture
def tiny_frames(rng):
    """[T=3, B=2, n=2, 4, 4] binary event frames."""
    return DenseTensor((rng.random((3, 2, 2, 4, 4)) < 0.4).astype(np.float32))
