"""End-to-end embedding quality on a planted-partition graph.

The graph has four classes and contiguous ids, so a first-fit split keeps
most of each class on one rank.
"""

import numpy as np
import pytest

from distembed.evaluation import evaluate_embeddings, make_split
from distembed.graph import partition_first_fit
from distembed.sampling import WalkConfig
from distembed.training import Hyperparams, train

from conftest import clustered_graph


@pytest.fixture(scope="module")
def planted():
    g, labels = clustered_graph(2000, 4, 10, 0.8, seed=0)
    return g, make_split(dict(enumerate(labels.tolist())), 0.10, seed=0)


@pytest.mark.parametrize("p, batch", [(1, 20_000), (4, 5_000)])
def test_local_variant_separates_classes(planted, p, batch):
    g, split = planted
    walk = WalkConfig(variant="local", batch_size=batch, num_batches=50)
    U, _ = train(g, partition_first_fit(g, p), walk, Hyperparams(dim=64), seed=1).embeddings()
    assert evaluate_embeddings(U, split).micro_f1 >= 0.9


def test_random_vectors_score_near_chance(planted):
    g, split = planted
    U = np.random.default_rng(0).normal(size=(g.num_vertices, 64))
    assert evaluate_embeddings(U, split).micro_f1 <= 0.35


def test_remote_variant_learns_too(planted):
    g, split = planted
    walk = WalkConfig(variant="aug-pair", steps=40, batch_size=5_000, num_batches=40)
    U, _ = train(g, partition_first_fit(g, 4), walk, Hyperparams(dim=64), seed=1).embeddings()
    assert evaluate_embeddings(U, split).micro_f1 >= 0.6
