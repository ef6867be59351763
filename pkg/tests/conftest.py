"""Shared fixtures.

The trained denoiser is expensive (a minute of CPU at acceptance sizes),
so one session-scoped instance is shared by every test that needs it;
its world is shared too so token embeddings line up.
"""

import numpy as np
import pytest

from diffurank.toy import BlendDenoiser, generate_world, train_toy_denoiser

WORLD_SEED = 11
TRAIN_SEED = 5


@pytest.fixture(scope="session")
def toy_world():
    return generate_world(100, num_views=6, seed=WORLD_SEED)


@pytest.fixture(scope="session")
def trained_denoiser(toy_world):
    return train_toy_denoiser(toy_world, epochs=60, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def blend_denoiser(toy_world):
    return BlendDenoiser.for_world(toy_world)


@pytest.fixture()
def rng():
    return np.random.default_rng(123)
