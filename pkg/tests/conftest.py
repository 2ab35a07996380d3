# conftest.py
import logging

import numpy as np
import pytest
import torch

from app.core.config import ModelConfig, PreprocessConfig, TrainConfig
from app.core.phantom import PhantomConfig, write_phantom_dataset

# Setup logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def tiny_train_config(out_dir, **overrides) -> TrainConfig:
    """Smallest configuration that still exercises every component"""
    config = TrainConfig(
        preprocess=PreprocessConfig(patch_size=(16, 16, 16)),
        model=ModelConfig(embed_dim=16, unet_depth=2, base_channels=4, c_mid=4, adapter_ratio=4),
        batch_size=2,
        lr=2e-3,
        max_epochs=2,
        steps_per_epoch=2,
        seed=0,
        out_dir=str(out_dir)
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    config.apply_ablation()
    config.validate()
    return config


def small_phantom_config(seed: int = 3) -> PhantomConfig:
    return PhantomConfig(
        shape=(32, 32, 32),
        tubes_per_structure=1,
        radius_range=(1.5, 2.0),
        segment_length=8.0,
        branching_depth=1,
        distractor_tubes=1,
        seed=seed
    )


@pytest.fixture
def tiny_config(tmp_path):
    return tiny_train_config(tmp_path / 'run')


@pytest.fixture(scope='session')
def phantom_manifest(tmp_path_factory):
    """Six 32^3 phantom cases, the first three half-labeled"""
    out_dir = tmp_path_factory.mktemp('phantoms')
    path = write_phantom_dataset(str(out_dir), 6, small_phantom_config(), half_fraction=0.5)
    logger.info(f"Phantom dataset written to {path}")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
