from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from evizilla.config import TrainConfig
from evizilla.data import SbmSpec, generate_sbm, load_citation_raw
from evizilla.graph_core import FeatureMatrix, normalize_adjacency, propagate
from evizilla.training import train

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_bundle():
    return load_citation_raw(FIXTURES / "toy.content", FIXTURES / "toy.cites")


@pytest.fixture(scope="session")
def small_sbm():
    """Quick 2-block graph for training-path tests."""
    return generate_sbm(
        SbmSpec(n=80, k=2, p_in=0.2, p_out=0.01, feature_dim=4, separation=2.0, noise=0.5, seed=3,
                train_per_class=8, val_per_class=8, layout="axis")
    )


@pytest.fixture(scope="session")
def quick_config() -> TrainConfig:
    return TrainConfig(hidden_size=8, propagation_steps=2, max_epochs=40, patience=15, seed=0)


@pytest.fixture(scope="session")
def trained_small(small_sbm, quick_config):
    params, history = train(small_sbm, quick_config)
    return params, history


@pytest.fixture
def six_node_hops():
    """6 nodes, 2 propagation steps, d=3; the gradient-check toy."""
    r = np.random.default_rng(7)
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]
    X = FeatureMatrix(r.normal(size=(6, 3)))
    return propagate(normalize_adjacency(edges, 6), X, 2)


@pytest.fixture(scope="session")
def benchmark_sbm():
    """The desk-scale block-model benchmark graph (ray layout, 32 features)."""
    return generate_sbm(SbmSpec(n=300, k=3, p_in=0.1, p_out=0.01, seed=0))


@pytest.fixture(scope="session")
def bench_config() -> TrainConfig:
    return TrainConfig(propagation_steps=8, seed=0, normalize_hops=True)
