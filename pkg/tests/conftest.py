import numpy as np
import pytest

from graphrec.graphdata import NeighborView, RatingGraph, RatingTriple, SocialGraph
from graphrec.model import ModelShape
from graphrec.training import init_params


class Fixture:
    def __init__(self, n_users, n_items, triples, edges, dim=4, seed=0, depth=3, bias_std=0.1, weight_std=None):
        self.triples = [RatingTriple(*t) for t in triples]
        self.edges = list(edges)
        self.graph = RatingGraph(self.triples, n_users, n_items)
        self.social = SocialGraph.from_edges(n_users, self.edges)
        self.view = NeighborView(self.graph, self.social)
        self.shape = ModelShape(n_users, n_items, 5, dim, depth)
        self.params = init_params(self.shape, seed)
        rng = np.random.default_rng(seed + 1000)
        for name, arr in self.params.tensors.items():
            if weight_std is not None and not name.rsplit(".", 1)[-1].startswith("b"):
                arr[...] = rng.normal(0.0, weight_std, arr.shape)
            if name.rsplit(".", 1)[-1] in ("b", "b1", "b2") and bias_std:
                # nonzero biases keep ReLUs away from their kink on empty neighbourhoods
                arr[...] = rng.normal(0.0, bias_std, arr.shape)

    @property
    def pairs(self):
        return [(t.user, t.item) for t in self.triples]

    @property
    def truths(self):
        return [t.rating for t in self.triples]


# 3 users / 3 items
TINY = dict(
    n_users=3, n_items=3,
    triples=[(0, 0, 5), (0, 1, 3), (1, 1, 2), (1, 2, 4), (2, 0, 1), (2, 2, 3)],
    edges=[(0, 1), (1, 2), (2, 0), (0, 2)],
)

# 4 users / 4 items / 6 ratings / 3 social edges
SMALL = dict(
    n_users=4, n_items=4,
    triples=[(0, 0, 4), (0, 1, 2), (1, 1, 5), (2, 2, 3), (3, 3, 1), (1, 3, 4)],
    edges=[(0, 1), (1, 2), (3, 0)],
)

# 4 users / 4 items / 6 ratings / 3 social edges, shaped so every attention network on pair (0, 0)
# sees at least two neighbours after the target edge is excluded
LIVE = dict(
    n_users=4, n_items=4,
    triples=[(0, 0, 4), (0, 1, 2), (0, 2, 5), (1, 0, 3), (2, 0, 1), (3, 3, 2)],
    edges=[(0, 1), (0, 2), (3, 1)],
)

# 5 users / 5 items, includes a socially isolated user (4) and an unrated item (4)
FIVE = dict(
    n_users=5, n_items=5,
    triples=[(0, 0, 5), (0, 1, 4), (0, 2, 1), (1, 0, 3), (1, 3, 2), (2, 1, 5), (2, 2, 2),
             (3, 3, 4), (3, 0, 1), (4, 2, 3), (4, 1, 2), (2, 3, 3)],
    edges=[(0, 1), (0, 2), (1, 0), (2, 3), (3, 1), (3, 2), (1, 3)],
)


@pytest.fixture
def tiny():
    return Fixture(**TINY, dim=4, seed=3, weight_std=0.5)


@pytest.fixture
def small():
    return Fixture(**SMALL, dim=4, seed=5, weight_std=0.5)


@pytest.fixture
def five():
    return Fixture(**FIVE, dim=5, seed=11, weight_std=0.5)
