import numpy as np
import pytest

from linkforge.graph import from_edges


def random_graph(n, p, seed, d=4):
    rng = np.random.default_rng(seed)
    a, b = np.triu_indices(n, 1)
    keep = rng.random(len(a)) < p
    return from_edges(n, np.stack([a[keep], b[keep]], axis=1), rng.normal(size=(n, d)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
