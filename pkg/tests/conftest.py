import numpy as np
import pytest

from condsim.datagen import gen_world, sample_triplets


@pytest.fixture(scope="session")
def small_world():
    return gen_world(n_instances=300, n_conditions=4, n_values=4, n_free=0,
                     noise=0.1, seed=7)


@pytest.fixture(scope="session")
def small_sets(small_world):
    train = sample_triplets(small_world, 150, seed=8, split="train")
    val = sample_triplets(small_world, 40, seed=9, split="val")
    test = sample_triplets(small_world, 40, seed=10, split="test")
    return train, val, test


def random_simplex(rng, k):
    w = rng.exponential(size=k)
    return w / w.sum()
