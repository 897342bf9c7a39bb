import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from funcspace.genlab import Corpus, GenConfig, generate_corpus, grid_inputs  # noqa: E402
from funcspace.models import ArchitectureConfig, MultiScaleAutoencoder  # noqa: E402
from funcspace.netrep import MlpSpec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale acceptance tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale run, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_architecture(**overrides):
    values = dict(
        activation="sigmoid",
        input_dim=3,
        output_dim=1,
        n_max=4,
        l_max=2,
        d_z=8,
        conv_channels=[2] * 7,
        trunk_widths=[16, 16, 16],
        init_seed=0,
    )
    values.update(overrides)
    return ArchitectureConfig(**values)


def tiny_gen_config(**overrides):
    values = dict(
        activation="sigmoid",
        input_dim=3,
        output_dim=1,
        n_max=4,
        l_max=2,
        hidden_min=2,
        hidden_max=4,
        seed=0,
    )
    values.update(overrides)
    return GenConfig(**values)


@pytest.fixture
def architecture():
    return tiny_architecture()


@pytest.fixture
def model(architecture):
    return MultiScaleAutoencoder(architecture)


@pytest.fixture
def gen_config():
    return tiny_gen_config()


@pytest.fixture
def small_grid():
    return grid_inputs(dims=3, per_dim=3)


@pytest.fixture
def corpus(gen_config, small_grid):
    specs = generate_corpus(gen_config, 12).specs
    return Corpus(specs, small_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def dense_spec(activation, hidden_sizes, weight=1.0, input_dim=3, output_dim=1):
    sizes = (input_dim, *hidden_sizes, output_dim)
    return MlpSpec(
        activation=activation,
        input_dim=input_dim,
        output_dim=output_dim,
        hidden_sizes=hidden_sizes,
        weights=[np.full((sizes[k], sizes[k + 1]), weight) for k in range(len(sizes) - 1)],
        masks=[np.ones(h, bool) for h in hidden_sizes],
    )


def random_spec(rng, activation="sigmoid", n_max=5, l_max=3, input_dim=3, output_dim=1):
    depth = int(rng.integers(1, l_max + 1))
    hidden = [int(h) for h in rng.integers(1, n_max + 1, size=depth)]
    sizes = (input_dim, *hidden, output_dim)
    weights = []
    for k in range(len(sizes) - 1):
        weight = rng.uniform(-3, 3, size=(sizes[k], sizes[k + 1]))
        weight[rng.random(weight.shape) < 0.3] = 0.0
        weights.append(weight)
    masks = [rng.random(h) < 0.8 for h in hidden]
    return MlpSpec(
        activation=activation,
        input_dim=input_dim,
        output_dim=output_dim,
        hidden_sizes=hidden,
        weights=weights,
        masks=masks,
    )
