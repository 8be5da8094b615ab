import numpy as np
import pytest
import torch

torch.set_num_threads(1)  # fixed reduction order keeps runs reproducible

from orbitdiff.denoiser import FrameLayout, PrecondConfig, build_denoiser
from orbitdiff.network import NetConfig
from orbitdiff.synthdata import DatasetConfig, Dataset, build_dataset


TINY_SIZE = 16


def tiny_layout() -> FrameLayout:
    return FrameLayout(size=TINY_SIZE)


def tiny_net_cfg(width: int = 16) -> NetConfig:
    lay = tiny_layout()
    return NetConfig(in_channels=lay.c_total, out_channels=lay.c_lat,
                     width=width, image_size=TINY_SIZE)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("tiny_data")
    manifest = build_dataset(root, DatasetConfig(n_identities=4, n_views=24,
                                                 size=TINY_SIZE, seed=11))
    return Dataset(manifest)


@pytest.fixture(scope="session")
def tiny_denoiser():
    return build_denoiser(tiny_net_cfg(), tiny_layout(), PrecondConfig(), seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(np.random.SeedSequence([1234]))
