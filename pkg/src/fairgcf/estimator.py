"""Scikit-learn style estimator wrapping the full recommendation pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from fairgcf.data import RatingDataset, Split, split_per_user
from fairgcf.graph import build_graph
from fairgcf.metrics import EvalReport, GroupAssignment, evaluate_split, rank_all
from fairgcf.propagation import score_pairs
from fairgcf.quality import filter_low_quality
from fairgcf.seeding import derive_seed
from fairgcf.training import TrainConfig
from fairgcf.training import fit as train_fit


class FairLightGCN(BaseEstimator):
    """Fairness-aware light graph convolution recommender.

    Training edges can first pass through a quality filter that drops all
    edges of unpopular items whose ratings fall mostly below a baseline
    prediction; the surviving graph is then trained by cost-sensitive edge
    classification (or plain cross-entropy / BPR for comparison arms).

    Parameters
    ----------
    objective : {"cost_sensitive_ce", "plain_ce", "bpr"}
        Training loss.
    lambda_ : float in [0, 1]
        Cost-sensitivity weight; positives weighted (1 - lambda_),
        sampled negatives (1 + lambda_). Only used by cost_sensitive_ce.
    gamma : int
        Degree threshold of the quality filter.
    apply_filter : bool
        Whether to filter the training graph before fitting.
    dim, n_layers : int
        Embedding width and number of propagation layers.
    learning_rate, batch_size, max_epochs, patience : optimization knobs.
    val_cutoff : int
        NDCG cutoff used for early stopping.
    optimizer : {"adam", "sgd"}
    propagation_refresh : {"batch", "epoch"}
        Whether embeddings are re-propagated before every batch update or
        once per epoch with a single accumulated update.
    split_fractions : (train, validation, test) fractions used when ``fit``
        receives a raw :class:`RatingDataset` instead of a :class:`Split`.
    seed : int
        Master seed; named substreams drive splitting, init and sampling.

    Attributes
    ----------
    state_ : trained embeddings (best validation checkpoint).
    trace_ : per-epoch training history.
    split_ : the split that was fitted.
    graph_ : the (possibly filtered) training graph.
    filter_report_ : audit record of the quality filter, or None.
    item_degree_ : unfiltered train degrees, the popularity table used by
        the fairness metrics.
    groups_ : popular/unpopular item assignment derived from item_degree_.
    """

    def __init__(
        self,
        objective: str = "cost_sensitive_ce",
        lambda_: float = 0.1,
        gamma: int = 20,
        apply_filter: bool = True,
        dim: int = 64,
        n_layers: int = 3,
        learning_rate: float = 1e-3,
        batch_size: int = 2048,
        max_epochs: int = 500,
        patience: int = 20,
        val_cutoff: int = 100,
        optimizer: str = "adam",
        propagation_refresh: str = "batch",
        split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
        seed: int = 0,
    ):
        self.objective = objective
        self.lambda_ = lambda_
        self.gamma = gamma
        self.apply_filter = apply_filter
        self.dim = dim
        self.n_layers = n_layers
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_cutoff = val_cutoff
        self.optimizer = optimizer
        self.propagation_refresh = propagation_refresh
        self.split_fractions = split_fractions
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_=self.lambda_,
            gamma=self.gamma,
            dim=self.dim,
            n_layers=self.n_layers,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=derive_seed(self.seed, "train"),
            objective=self.objective,
            val_cutoff=self.val_cutoff,
            optimizer=self.optimizer,
            propagation_refresh=self.propagation_refresh,
        )

    def fit(self, X, y=None) -> "FairLightGCN":
        """Train on a :class:`Split`, or split a :class:`RatingDataset` first."""
        if isinstance(X, Split):
            split = X
        elif isinstance(X, RatingDataset):
            split = split_per_user(
                X, self.split_fractions, seed=derive_seed(self.seed, "split")
            )
        else:
            raise TypeError(f"fit expects a Split or RatingDataset, got {type(X).__name__}")

        graph = build_graph(split.train)
        self.item_degree_ = graph.item_degree.copy()
        self.groups_ = GroupAssignment.from_degrees(self.item_degree_)
        self.filter_report_ = None
        if self.apply_filter:
            graph, self.filter_report_ = filter_low_quality(graph, split.train, self.gamma)

        self.split_ = split
        self.graph_ = graph
        self.state_, self.trace_ = train_fit(split, self._train_config(), graph=graph)
        self.n_users_ = split.num_users
        self.n_items_ = split.num_items
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "state_"):
            raise NotFittedError(
                "This FairLightGCN instance is not fitted yet; call fit first."
            )

    def decision_function(self, X) -> np.ndarray:
        """Raw dot-product scores for an (n, 2) array of (user, item) pairs."""
        self._check_fitted()
        pairs = np.asarray(X, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("expected an (n, 2) array of (user, item) pairs")
        raw, _ = score_pairs(self.state_, pairs[:, 0], pairs[:, 1])
        return raw

    def predict(self, X) -> np.ndarray:
        """Interaction probabilities for an (n, 2) array of (user, item) pairs."""
        self._check_fitted()
        pairs = np.asarray(X, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("expected an (n, 2) array of (user, item) pairs")
        _, prob = score_pairs(self.state_, pairs[:, 0], pairs[:, 1])
        return prob

    def recommend(self, n: int = 10) -> list:
        """Top-``n`` lists for every user with a non-empty test profile."""
        self._check_fitted()
        return rank_all(self.state_, self.split_, n)

    def evaluate(self, cutoffs=(100, 300), keep_per_user: bool = True) -> EvalReport:
        """Utility and fairness metrics on the fitted split's test profiles."""
        self._check_fitted()
        return evaluate_split(
            self.state_,
            self.split_,
            cutoffs=cutoffs,
            item_degree=self.item_degree_,
            groups=self.groups_,
            keep_per_user=keep_per_user,
        )
