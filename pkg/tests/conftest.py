"""Shared fixtures: small corpora, random batches and a trained chain encoder."""

import numpy as np
import pytest

from crl.encoders import TrainConfig, train
from crl.objectives import BatchSample
from crl.testbed import CorpusConfig, generate_corpus

TEST_GAMMA = 0.9


def random_batch(rng: np.random.Generator, size: int, num_tasks: int, dim: int = 4) -> list[BatchSample]:
    """Batch where every task appears at least once; task id doubles as goal id."""
    tasks = np.concatenate([np.arange(num_tasks), rng.integers(num_tasks, size=size - num_tasks)])
    samples = []
    for j, task in enumerate(tasks):
        T = int(rng.integers(1, 12))
        samples.append(BatchSample(j, int(task), int(task), int(rng.integers(1, T + 1)), T,
                                   rng.normal(size=dim), (int(task),)))
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain_config():
    return CorpusConfig(family="chain", num_tasks=2, trajectories_per_task=4, size=24,
                        gamma=TEST_GAMMA, seed=0)


@pytest.fixture
def chain_corpus(chain_config):
    return generate_corpus(chain_config)


@pytest.fixture
def grid_corpus():
    return generate_corpus(CorpusConfig(family="grid", num_tasks=4, trajectories_per_task=3, size=8,
                                        gamma=TEST_GAMMA, seed=1))


@pytest.fixture(scope="session")
def trained_chain():
    """Chain corpus and an encoder trained on it to convergence."""
    corpus = generate_corpus(CorpusConfig(family="chain", num_tasks=2, trajectories_per_task=4,
                                          size=24, gamma=TEST_GAMMA, seed=0))
    config = TrainConfig(gamma=TEST_GAMMA, steps=3000, learning_rate=1e-2, seed=0, log_every=0)
    return corpus, config, train(corpus, config)


@pytest.fixture
def make_batch():
    return random_batch
