import numpy as np
import pytest
import torch

from adaptsense import DatasetConfig, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg() -> DatasetConfig:
    # smallest config whose 70/15/15 split keeps every split non-empty
    return DatasetConfig(n_episodes=8, T=4, seed=5)


@pytest.fixture(scope="session")
def tiny_episodes(tiny_cfg):
    return generate_dataset(tiny_cfg)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
