"""Quality-aware edge filtering for the training graph.

A simple baseline predictor (global mean plus independent user and item
deviations) scores every training interaction. Interactions rated above
their baseline count as positive evidence for the item. Items that are both
unpopular (train degree below a threshold ``gamma``) and poorly received
(fewer than two thirds of their interactions positive) have all their edges
removed from the training graph, so that genuinely low-quality long-tail
items stop being treated as victims of popularity bias.

The removal condition is evaluated once against the original degrees; a
second pass over the filtered output removes nothing. Filtered-out items
remain as zero-degree nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from fairgcf.data import RatingDataset
from fairgcf.graph import BipartiteGraph, graph_from_edges
from fairgcf.validation import check_nonnegative_int

POSITIVE_FRACTION_NUM = 2
POSITIVE_FRACTION_DEN = 3


@dataclass
class BaselineModel:
    """Rating baseline: global mean plus per-user and per-item deviations.

    Deviations are independent, unregularized means of (rating - mu) over
    each user's and each item's interactions. Nodes without training
    ratings carry a deviation of 0.
    """

    mu: float
    user_dev: np.ndarray
    item_dev: np.ndarray

    def predict(self, u: int, i: int) -> float:
        return self.mu + float(self.user_dev[u]) + float(self.item_dev[i])


@dataclass
class FilterReport:
    """Audit record of one filtering pass."""

    gamma: int
    removed_items: np.ndarray
    removed_edges: int
    positive_fraction: np.ndarray  # per item; NaN for zero-degree items
    disconnected_users: np.ndarray  # users left with no train edges

    def to_dict(self) -> dict:
        frac = [None if np.isnan(f) else float(f) for f in self.positive_fraction]
        return {
            "gamma": self.gamma,
            "removed_items": [int(i) for i in self.removed_items],
            "removed_edges": self.removed_edges,
            "disconnected_users": [int(u) for u in self.disconnected_users],
            "positive_fraction": frac,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def fit_baseline(train: RatingDataset) -> BaselineModel:
    """Estimate mu, user deviations and item deviations from train ratings."""
    if len(train) == 0:
        raise ValueError("cannot fit a baseline on an empty dataset")
    mu = float(train.ratings.mean())
    centered = train.ratings - mu

    user_counts = np.bincount(train.users, minlength=train.num_users)
    item_counts = np.bincount(train.items, minlength=train.num_items)
    user_sums = np.bincount(train.users, weights=centered, minlength=train.num_users)
    item_sums = np.bincount(train.items, weights=centered, minlength=train.num_items)

    user_dev = np.divide(user_sums, user_counts, out=np.zeros_like(user_sums), where=user_counts > 0)
    item_dev = np.divide(item_sums, item_counts, out=np.zeros_like(item_sums), where=item_counts > 0)
    return BaselineModel(mu=mu, user_dev=user_dev, item_dev=item_dev)


def edge_error(model: BaselineModel, u: int, i: int, rating: float) -> float:
    """Observed rating minus its baseline prediction."""
    return float(rating) - model.predict(u, i)


def edge_errors(model: BaselineModel, users, items, ratings) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    return ratings - (model.mu + model.user_dev[users] + model.item_dev[items])


def filter_low_quality(
    graph: BipartiteGraph, train: RatingDataset, gamma: int, model: BaselineModel | None = None
) -> tuple[BipartiteGraph, FilterReport]:
    """Remove all edges of unpopular items with mostly non-positive errors.

    An item fails when its original train degree is below ``gamma`` AND
    strictly fewer than 2/3 of its interactions have a positive baseline
    error. The fraction test uses integer arithmetic, so a fraction of
    exactly 2/3 is retained. Degrees are the pre-filter degrees; there is
    no cascading re-evaluation.

    Pass ``model`` to score errors against a previously fitted baseline
    instead of refitting on ``train``.
    """
    check_nonnegative_int(gamma, "gamma")
    if graph.num_edges != len(train):
        raise ValueError("graph does not match the train dataset it was built from")

    if model is None:
        model = fit_baseline(train)
    errors = edge_errors(model, train.users, train.items, train.ratings)
    pos_counts = np.bincount(train.items[errors > 0], minlength=train.num_items)
    degree = np.bincount(train.items, minlength=train.num_items)

    failing = (
        (degree > 0)
        & (degree < gamma)
        & (POSITIVE_FRACTION_DEN * pos_counts < POSITIVE_FRACTION_NUM * degree)
    )

    keep_edge = ~failing[train.items]
    filtered = graph_from_edges(
        train.num_users, train.num_items, train.users[keep_edge], train.items[keep_edge]
    )

    with np.errstate(invalid="ignore"):
        positive_fraction = np.where(degree > 0, pos_counts / np.maximum(degree, 1), np.nan)
    disconnected = np.flatnonzero((graph.user_degree > 0) & (filtered.user_degree == 0))
    report = FilterReport(
        gamma=int(gamma),
        removed_items=np.flatnonzero(failing),
        removed_edges=int((~keep_edge).sum()),
        positive_fraction=positive_fraction,
        disconnected_users=disconnected,
    )
    return filtered, report
