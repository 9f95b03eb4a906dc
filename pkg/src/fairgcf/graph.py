"""Bipartite interaction graph with a symmetric-normalized adjacency operator.

Node layout: users occupy indices ``0 .. num_users-1``, items occupy
``num_users .. num_users+num_items-1``. The adjacency is the usual block
structure::

    [ 0   R ]
    [ R^T 0 ]

and the stored operator is D^{-1/2} A D^{-1/2}, whose entry for an edge
(u, i) is 1/sqrt(deg(u) * deg(i)). Zero-degree nodes keep all-zero rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from fairgcf.data import RatingDataset, _group_by_user


@dataclass(eq=False)
class BipartiteGraph:
    num_users: int
    num_items: int
    users: np.ndarray  # edge endpoints, parallel arrays
    items: np.ndarray
    user_degree: np.ndarray
    item_degree: np.ndarray
    norm_adjacency: sp.csr_matrix = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return self.users.shape[0]

    @cached_property
    def _items_by_user(self) -> list[np.ndarray]:
        return [np.sort(arr) for arr in _group_by_user(self.users, self.items, self.num_users)]

    @cached_property
    def pair_keys(self) -> set[int]:
        """Set of u * num_items + i keys for O(1) edge membership tests."""
        return set((self.users * self.num_items + self.items).tolist())

    def user_items(self, u: int) -> np.ndarray:
        """Sorted item ids interacted with by user ``u``."""
        return self._items_by_user[u]

    def has_edge(self, u: int, i: int) -> bool:
        return u * self.num_items + i in self.pair_keys


def graph_from_edges(
    num_users: int, num_items: int, users: np.ndarray, items: np.ndarray
) -> BipartiteGraph:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    user_degree = np.bincount(users, minlength=num_users)
    item_degree = np.bincount(items, minlength=num_items)

    weights = 1.0 / np.sqrt(user_degree[users] * item_degree[items])

    n = num_users + num_items
    rows = np.concatenate([users, items + num_users])
    cols = np.concatenate([items + num_users, users])
    data = np.concatenate([weights, weights])
    norm_adjacency = sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    return BipartiteGraph(
        num_users=num_users,
        num_items=num_items,
        users=users,
        items=items,
        user_degree=user_degree,
        item_degree=item_degree,
        norm_adjacency=norm_adjacency,
    )


def build_graph(train: RatingDataset) -> BipartiteGraph:
    """Interaction graph of the train split."""
    if len(train) == 0:
        raise ValueError("cannot build a graph from an empty dataset")
    return graph_from_edges(train.num_users, train.num_items, train.users, train.items)
