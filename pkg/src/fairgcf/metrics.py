"""Top-K ranking metrics and popularity-fairness metrics.

Ranking protocol: for each user with a non-empty test profile, every item
outside the user's train and validation profiles is a candidate. Candidates
are ordered by descending score with ties broken by ascending item id. Rank
positions are 1-based over the full candidate set; top-K lists are its
prefix.

Utility metrics (Recall, NDCG, MRR, MAP) use binary relevance against the
test profile. Fairness metrics:

* popularity-rank correlation per user: negative mean Spearman correlation
  between the degrees of a user's test items and their predicted rank
  positions (full ranking, not truncated);
* popularity-rank correlation per item: negative corpus-level Spearman
  correlation between item degree and the item's mean predicted rank over
  the users holding it in their test profiles;
* equal-opportunity gap: mean over users of |hits from popular group -
  hits from unpopular group| / total hits within the top-K, 0 for hitless
  users.

Item degrees are always taken from the unfiltered train split so that every
comparison arm is judged against the same popularity table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from fairgcf.data import Split
from fairgcf.propagation import EmbeddingState

UTILITY_METRICS = ("recall", "ndcg", "mrr", "map")
ALL_METRICS = UTILITY_METRICS + ("pru", "pri", "eo")


def average_ranks(values) -> np.ndarray:
    """1-based ranks of ``values`` ascending, ties receiving their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sorted_values[1:] != sorted_values[:-1]
    group_id = np.cumsum(new_group) - 1
    counts = np.bincount(group_id)
    ends = np.cumsum(counts)
    starts = ends - counts
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[group_id]
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties.

    Raises ValueError when either input is constant (correlation undefined).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d arrays of equal length")
    if x.shape[0] < 2:
        raise ValueError("need at least two observations")
    rx = average_ranks(x) - (x.shape[0] + 1) / 2.0
    ry = average_ranks(y) - (y.shape[0] + 1) / 2.0
    ssx = float(rx @ rx)
    ssy = float(ry @ ry)
    if ssx == 0.0 or ssy == 0.0:
        raise ValueError("correlation undefined for constant input")
    return float((rx @ ry) / np.sqrt(ssx * ssy))


@dataclass(frozen=True)
class RankedList:
    """Top-``cutoff`` recommendation list for one user, best first."""

    user: int
    items: np.ndarray


@dataclass
class GroupAssignment:
    """Popular / unpopular item partition by train degree."""

    popular_mask: np.ndarray

    @classmethod
    def from_degrees(cls, item_degree, top_fraction: float = 0.2) -> "GroupAssignment":
        """Top ``round(top_fraction * n)`` items by degree, ties to lower ids."""
        item_degree = np.asarray(item_degree)
        n = item_degree.shape[0]
        n_popular = int(round(top_fraction * n))
        order = np.lexsort((np.arange(n), -item_degree))
        mask = np.zeros(n, dtype=bool)
        mask[order[:n_popular]] = True
        return cls(popular_mask=mask)

    @property
    def popular(self) -> np.ndarray:
        return np.flatnonzero(self.popular_mask)

    @property
    def unpopular(self) -> np.ndarray:
        return np.flatnonzero(~self.popular_mask)


def recall_at_m(ranked_items, test_items) -> float:
    """Fraction of the user's test items appearing in the ranked list."""
    test_items = np.asarray(test_items)
    hits = np.isin(np.asarray(ranked_items), test_items).sum()
    return float(hits) / test_items.shape[0]


def ndcg_at_n(ranked_items, test_items, n: int | None = None) -> float:
    """Binary-relevance NDCG with the conventional best-first ideal ranking."""
    ranked_items = np.asarray(ranked_items)
    test_items = np.asarray(test_items)
    if n is None:
        n = ranked_items.shape[0]
    top = ranked_items[:n]
    hit = np.isin(top, test_items)
    positions = np.flatnonzero(hit) + 1
    dcg = float(np.sum(1.0 / np.log2(positions + 1)))
    ideal = np.arange(1, min(n, test_items.shape[0]) + 1)
    idcg = float(np.sum(1.0 / np.log2(ideal + 1)))
    return dcg / idcg


def mrr(ranked_items, test_items) -> float:
    """Reciprocal rank of the first hit; 0 when the list contains no hit."""
    hit = np.isin(np.asarray(ranked_items), np.asarray(test_items))
    positions = np.flatnonzero(hit)
    if positions.shape[0] == 0:
        return 0.0
    return 1.0 / float(positions[0] + 1)


def average_precision(ranked_items, test_items, n: int | None = None) -> float:
    """Mean of precision-at-hit-positions, normalized by |test items|."""
    ranked_items = np.asarray(ranked_items)
    test_items = np.asarray(test_items)
    if n is None:
        n = ranked_items.shape[0]
    hit = np.isin(ranked_items[:n], test_items)
    positions = np.flatnonzero(hit) + 1
    if positions.shape[0] == 0:
        return 0.0
    precisions = np.arange(1, positions.shape[0] + 1) / positions
    return float(precisions.sum()) / test_items.shape[0]


def pru(test_items_by_user, test_ranks_by_user, item_degree) -> tuple[float | None, int]:
    """Negative mean per-user rank correlation of test-item degree vs rank.

    Users with fewer than two test items or a constant degree vector are
    excluded; the second return value counts them. Returns ``(None, k)``
    when no user qualifies.
    """
    item_degree = np.asarray(item_degree)
    values = []
    excluded = 0
    for u, items in test_items_by_user.items():
        ranks = test_ranks_by_user[u]
        if len(items) < 2:
            excluded += 1
            continue
        try:
            values.append(spearman(item_degree[items], ranks))
        except ValueError:
            excluded += 1
    if not values:
        return None, excluded
    return float(-np.mean(values)), excluded


def pri(test_items_by_user, test_ranks_by_user, item_degree, num_items: int) -> float | None:
    """Negative corpus-level rank correlation of item degree vs mean rank.

    Mean ranks average each item's predicted position over the users whose
    test profile contains it. Returns None when fewer than two items are
    eligible or the correlation is undefined.
    """
    item_degree = np.asarray(item_degree)
    rank_sum = np.zeros(num_items)
    rank_cnt = np.zeros(num_items)
    for u, items in test_items_by_user.items():
        ranks = test_ranks_by_user[u]
        np.add.at(rank_sum, items, ranks)
        np.add.at(rank_cnt, items, 1.0)
    eligible = rank_cnt > 0
    if eligible.sum() < 2:
        return None
    mean_rank = rank_sum[eligible] / rank_cnt[eligible]
    try:
        return -spearman(item_degree[eligible], mean_rank)
    except ValueError:
        return None


def eo(topk_by_user, test_items_by_user, groups: GroupAssignment) -> float:
    """Mean normalized hit-count gap between popular and unpopular groups."""
    contributions = []
    for u, items in test_items_by_user.items():
        top = topk_by_user[u]
        hits = top[np.isin(top, items)]
        h_pop = int(groups.popular_mask[hits].sum())
        h_unpop = hits.shape[0] - h_pop
        total = h_pop + h_unpop
        contributions.append(abs(h_pop - h_unpop) / total if total else 0.0)
    return float(np.mean(contributions)) if contributions else 0.0


@dataclass
class EvalReport:
    """Corpus metrics per cutoff plus per-user breakdowns for one model."""

    cutoffs: tuple[int, ...]
    metrics: dict[int, dict[str, float | None]]
    pru: float | None
    pri: float | None
    pru_excluded_users: int
    n_users_evaluated: int
    group_sizes: tuple[int, int]
    per_user: dict[int, dict[str, list]] = field(default_factory=dict, repr=False)

    def to_dict(self, include_per_user: bool = True) -> dict:
        payload = {
            "cutoffs": list(self.cutoffs),
            "metrics": {str(c): dict(self.metrics[c]) for c in self.cutoffs},
            "pru": self.pru,
            "pri": self.pri,
            "pru_excluded_users": self.pru_excluded_users,
            "n_users_evaluated": self.n_users_evaluated,
            "groups": {
                "popular_items": self.group_sizes[0],
                "unpopular_items": self.group_sizes[1],
            },
        }
        if include_per_user:
            payload["per_user"] = {str(c): self.per_user[c] for c in self.per_user}
        return payload

    def to_json(self, include_per_user: bool = True, indent: int = 2) -> str:
        return json.dumps(self.to_dict(include_per_user), indent=indent, sort_keys=True)

    def plot_rows(self) -> list[tuple[int, str, float | None]]:
        """(cutoff, metric, value) rows for delimited plot files."""
        rows = []
        for c in self.cutoffs:
            for name in ALL_METRICS:
                rows.append((c, name, self.metrics[c][name]))
        return rows


def _candidate_order(scores: np.ndarray, excluded_mask: np.ndarray) -> np.ndarray:
    """Candidate item ids best-first: descending score, ties by ascending id."""
    candidates = np.flatnonzero(~excluded_mask)
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


def rank_candidates(
    state: EmbeddingState, user: int, excluded_items
) -> np.ndarray:
    """Full best-first ranking of one user's candidate items."""
    scores = state.item_final @ state.final[user]
    excluded_mask = np.zeros(state.num_items, dtype=bool)
    excluded_mask[np.asarray(excluded_items, dtype=np.int64)] = True
    return _candidate_order(scores, excluded_mask)


def _iter_user_orders(state, users, excluded_lists, chunk: int = 512):
    """Yield (user, full candidate order) scoring users in blocked matmuls."""
    users = np.asarray(users, dtype=np.int64)
    excluded_mask = np.zeros(state.num_items, dtype=bool)
    for lo in range(0, users.shape[0], chunk):
        block = users[lo:lo + chunk]
        scores = state.final[block] @ state.item_final.T
        for row, u in enumerate(block):
            exc = excluded_lists[u]
            excluded_mask[exc] = True
            yield int(u), _candidate_order(scores[row], excluded_mask)
            excluded_mask[exc] = False


def _exclusion_lists(split: Split) -> list[np.ndarray]:
    train_items = split.train.items_by_user()
    val_items = split.validation.items_by_user()
    return [
        np.union1d(train_items[u], val_items[u]) for u in range(split.num_users)
    ]


def rank_all(state: EmbeddingState, split: Split, cutoff: int) -> list[RankedList]:
    """Top-``cutoff`` lists for every user with a non-empty test profile."""
    excluded = _exclusion_lists(split)
    test_items = split.test.items_by_user()
    users = [u for u in range(split.num_users) if test_items[u].shape[0] > 0]
    return [
        RankedList(user=u, items=order[:cutoff])
        for u, order in _iter_user_orders(state, users, excluded)
    ]


def corpus_ndcg(
    state: EmbeddingState,
    target_items_by_user: list[np.ndarray],
    excluded_items_by_user: list[np.ndarray],
    cutoff: int,
    chunk: int = 512,
) -> float:
    """Mean NDCG@cutoff over users with non-empty targets.

    Used for early stopping, where targets are validation profiles and only
    train items are excluded from the candidates. Top lists come from a
    partial sort; among exactly tied scores the boundary selection is
    deterministic but may differ from the full ranking's id-order rule.
    """
    users = [u for u, t in enumerate(target_items_by_user) if t.shape[0] > 0]
    if not users:
        raise ValueError("no user has target items to evaluate")

    n_items = state.num_items
    k = min(cutoff, n_items)
    discounts = 1.0 / np.log2(np.arange(2, cutoff + 2))
    idcg_cum = np.concatenate([[0.0], np.cumsum(discounts)])

    total = 0.0
    users_arr = np.asarray(users, dtype=np.int64)
    for lo in range(0, users_arr.shape[0], chunk):
        block = users_arr[lo:lo + chunk]
        scores = state.final[block] @ state.item_final.T
        for row, u in enumerate(block):
            scores[row, excluded_items_by_user[u]] = -np.inf
        if k < n_items:
            part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(n_items), scores.shape)
        part_scores = np.take_along_axis(scores, part, axis=1)
        order = np.argsort(-part_scores, axis=1, kind="stable")
        top = np.take_along_axis(part, order, axis=1)
        top_scores = np.take_along_axis(part_scores, order, axis=1)
        for row, u in enumerate(block):
            top_u = top[row][top_scores[row] > -np.inf]
            targets = target_items_by_user[u]
            positions = np.flatnonzero(np.isin(top_u, targets)) + 1
            dcg = float(np.sum(1.0 / np.log2(positions + 1)))
            idcg = idcg_cum[min(cutoff, targets.shape[0])]
            total += dcg / idcg
    return total / len(users)


def evaluate_split(
    state: EmbeddingState,
    split: Split,
    cutoffs=(100, 300),
    item_degree=None,
    groups: GroupAssignment | None = None,
    keep_per_user: bool = True,
) -> EvalReport:
    """Full evaluation of a trained state on the test profiles of a split."""
    cutoffs = tuple(int(c) for c in cutoffs)
    if not cutoffs:
        raise ValueError("cutoffs must be non-empty")
    if item_degree is None:
        item_degree = np.bincount(split.train.items, minlength=split.num_items)
    item_degree = np.asarray(item_degree)
    if groups is None:
        groups = GroupAssignment.from_degrees(item_degree)

    excluded = _exclusion_lists(split)
    test_lists = split.test.items_by_user()

    test_items_by_user: dict[int, np.ndarray] = {}
    test_ranks_by_user: dict[int, np.ndarray] = {}
    topk_by_user: dict[int, dict[int, np.ndarray]] = {c: {} for c in cutoffs}
    per_user_vals = {c: {m: [] for m in UTILITY_METRICS + ("eo",)} for c in cutoffs}
    users_evaluated = []

    eval_users = [u for u in range(split.num_users) if test_lists[u].shape[0] > 0]
    rank_of = np.empty(split.num_items, dtype=np.int64)
    for u, order in _iter_user_orders(state, eval_users, excluded):
        targets = test_lists[u]
        rank_of[order] = np.arange(1, order.shape[0] + 1)

        users_evaluated.append(u)
        test_items_by_user[u] = targets
        test_ranks_by_user[u] = rank_of[targets].astype(np.float64)

        for c in cutoffs:
            top = order[:c]
            topk_by_user[c][u] = top
            hits = top[np.isin(top, targets)]
            h_pop = int(groups.popular_mask[hits].sum())
            h_unpop = hits.shape[0] - h_pop
            total = h_pop + h_unpop
            per_user_vals[c]["recall"].append(recall_at_m(top, targets))
            per_user_vals[c]["ndcg"].append(ndcg_at_n(top, targets, c))
            per_user_vals[c]["mrr"].append(mrr(top, targets))
            per_user_vals[c]["map"].append(average_precision(top, targets, c))
            per_user_vals[c]["eo"].append(abs(h_pop - h_unpop) / total if total else 0.0)

    if not users_evaluated:
        raise ValueError("no user has test items to evaluate")

    pru_value, pru_excluded = pru(test_items_by_user, test_ranks_by_user, item_degree)
    pri_value = pri(test_items_by_user, test_ranks_by_user, item_degree, split.num_items)

    metrics: dict[int, dict[str, float | None]] = {}
    per_user: dict[int, dict[str, list]] = {}
    for c in cutoffs:
        metrics[c] = {m: float(np.mean(per_user_vals[c][m])) for m in UTILITY_METRICS}
        metrics[c]["eo"] = float(np.mean(per_user_vals[c]["eo"]))
        metrics[c]["pru"] = pru_value
        metrics[c]["pri"] = pri_value
        per_user[c] = {"users": list(map(int, users_evaluated))}
        per_user[c].update(
            {m: list(map(float, per_user_vals[c][m])) for m in UTILITY_METRICS + ("eo",)}
        )

    n_popular = int(groups.popular_mask.sum())
    return EvalReport(
        cutoffs=cutoffs,
        metrics=metrics,
        pru=pru_value,
        pri=pri_value,
        pru_excluded_users=pru_excluded,
        n_users_evaluated=len(users_evaluated),
        group_sizes=(n_popular, int(split.num_items - n_popular)),
        per_user=per_user if keep_per_user else {},
    )
