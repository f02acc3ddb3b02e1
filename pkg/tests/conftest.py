import numpy as np
import pytest

from disagg import SynthSpec, generate_dataset, prepare_dataset


@pytest.fixture(scope="session")
def small_problem():
    """A 20x20 grid, 25 rectangular regions, two covariates, known truth."""
    spec = SynthSpec(nrows=20, ncols=20, n_regions=25, beta=(-3.0, 0.5, -0.25), seed=11)
    data = generate_dataset(spec)
    dataset, mask = prepare_dataset(data.stack, data.population, data.regions, data.mask)
    return data, dataset


@pytest.fixture(scope="session")
def linear_landscape():
    """The 40x40, 100-region linear landscape used for oracle comparisons."""
    spec = SynthSpec(nrows=40, ncols=40, n_regions=100, beta=(-3.0, 0.5, -0.25),
                     population_range=(500.0, 1500.0), seed=3)
    data = generate_dataset(spec)
    dataset, _ = prepare_dataset(data.stack, data.population, data.regions, data.mask)
    return data, dataset


def make_rng(seed):
    return np.random.default_rng(seed)
