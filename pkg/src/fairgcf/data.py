"""Explicit-feedback rating data: ingestion, k-core filtering, per-user splits.

Input format
------------
UTF-8 delimited text, one interaction per line::

    <user-key> <item-key> <rating> [extra fields ignored]

The delimiter is configurable (tab by default). A header line is detected
automatically: if the first line has enough fields but its rating field does
not parse as a number, it is skipped. Duplicate (user, item) records keep the
last rating seen. Ratings are mandatory; implicit-only exports (missing third
field) are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fairgcf.validation import check_fractions, check_positive_int


class IngestionError(ValueError):
    """Raised when the input stream cannot be parsed into interactions."""


class EmptyDatasetError(ValueError):
    """Raised when filtering eliminates every interaction."""


@dataclass
class RatingDataset:
    """User-item-rating triples over dense, contiguous indices.

    ``users``, ``items`` and ``ratings`` are parallel arrays, one entry per
    interaction. ``user_labels`` / ``item_labels`` map dense indices back to
    the raw keys of the source file when the dataset came from ingestion.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    num_users: int
    num_items: int
    rating_scale: tuple[float, float]
    user_labels: tuple[str, ...] | None = None
    item_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        self.rating_scale = (float(self.rating_scale[0]), float(self.rating_scale[1]))
        self.validate()

    def __len__(self) -> int:
        return self.users.shape[0]

    def validate(self) -> None:
        n = len(self)
        if self.items.shape[0] != n or self.ratings.shape[0] != n:
            raise ValueError("users, items and ratings must have equal length")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item index out of range")
            lo, hi = self.rating_scale
            if self.ratings.min() < lo or self.ratings.max() > hi:
                raise ValueError("rating outside rating_scale")
            keys = self.users * self.num_items + self.items
            if np.unique(keys).shape[0] != n:
                raise ValueError("duplicate (user, item) pair")

    def items_by_user(self) -> list[np.ndarray]:
        """Per-user arrays of interacted item ids, index-aligned with users."""
        return _group_by_user(self.users, self.items, self.num_users)

    def ratings_by_user(self) -> list[np.ndarray]:
        return _group_by_user(self.users, self.ratings, self.num_users)

    def subset(self, mask_or_index) -> "RatingDataset":
        """Dataset over the same index space, restricted to selected rows."""
        return RatingDataset(
            users=self.users[mask_or_index],
            items=self.items[mask_or_index],
            ratings=self.ratings[mask_or_index],
            num_users=self.num_users,
            num_items=self.num_items,
            rating_scale=self.rating_scale,
            user_labels=self.user_labels,
            item_labels=self.item_labels,
        )


@dataclass
class Split:
    """Per-user train/validation/test partition of one dataset.

    ``train_only_users`` counts users whose interaction count was too small
    to populate all three parts; their interactions went entirely to train.
    """

    train: RatingDataset
    validation: RatingDataset
    test: RatingDataset
    seed: int
    train_only_users: int = 0

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items


def _group_by_user(users: np.ndarray, values: np.ndarray, num_users: int) -> list[np.ndarray]:
    order = np.argsort(users, kind="stable")
    sorted_users = users[order]
    sorted_values = values[order]
    bounds = np.searchsorted(sorted_users, np.arange(num_users + 1))
    return [sorted_values[bounds[u]:bounds[u + 1]] for u in range(num_users)]


def _clean_field(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        text = text[1:-1]
    return text


def _parse_rating(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_interactions(source, delimiter: str = "\t") -> RatingDataset:
    """Read delimited rating records into a :class:`RatingDataset`.

    ``source`` may be a path or an open text/byte stream. Raw user and item
    keys are mapped to dense indices in order of first appearance; duplicate
    (user, item) pairs keep the last rating. Malformed records raise
    :class:`IngestionError` with their line number.
    """
    if hasattr(source, "read"):
        raw = source.read()
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
    else:
        raw = Path(source).read_text(encoding="utf-8")
    lines = raw.splitlines()

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    pair_rating: dict[tuple[int, int], float] = {}

    start = 0
    if lines:
        first = [_clean_field(f) for f in lines[0].split(delimiter)]
        if len(first) >= 3 and _parse_rating(first[2]) is None:
            start = 1  # header line

    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        fields = line.split(delimiter)
        if len(fields) < 3:
            raise IngestionError(
                f"line {lineno}: expected at least 3 fields, got {len(fields)}"
            )
        user_key = _clean_field(fields[0])
        item_key = _clean_field(fields[1])
        rating = _parse_rating(_clean_field(fields[2]))
        if rating is None:
            raise IngestionError(f"line {lineno}: unparsable rating {fields[2]!r}")
        u = user_index.setdefault(user_key, len(user_index))
        i = item_index.setdefault(item_key, len(item_index))
        pair_rating[(u, i)] = rating  # keep-last dedup

    if not pair_rating:
        raise IngestionError("no interaction records found")

    users = np.fromiter((u for u, _ in pair_rating), dtype=np.int64, count=len(pair_rating))
    items = np.fromiter((i for _, i in pair_rating), dtype=np.int64, count=len(pair_rating))
    ratings = np.fromiter(pair_rating.values(), dtype=np.float64, count=len(pair_rating))
    return RatingDataset(
        users=users,
        items=items,
        ratings=ratings,
        num_users=len(user_index),
        num_items=len(item_index),
        rating_scale=(float(ratings.min()), float(ratings.max())),
        user_labels=tuple(user_index),
        item_labels=tuple(item_index),
    )


def k_core_filter(dataset: RatingDataset, k: int) -> RatingDataset:
    """Iteratively peel users and items with fewer than ``k`` interactions.

    Peeling runs to fixpoint, so the result is the maximal sub-dataset in
    which every remaining user and item has degree >= k. Indices are
    re-densified (ascending original order). Raises
    :class:`EmptyDatasetError` if nothing survives.
    """
    check_positive_int(k, "k")
    keep = np.ones(len(dataset), dtype=bool)
    users, items = dataset.users, dataset.items
    while True:
        udeg = np.bincount(users[keep], minlength=dataset.num_users)
        ideg = np.bincount(items[keep], minlength=dataset.num_items)
        drop = keep & ((udeg[users] < k) | (ideg[items] < k))
        if not drop.any():
            break
        keep &= ~drop
        if not keep.any():
            raise EmptyDatasetError(f"dataset eliminated by {k}-core filtering")

    if keep.all():
        return dataset

    kept_users = np.unique(users[keep])
    kept_items = np.unique(items[keep])
    user_map = np.full(dataset.num_users, -1, dtype=np.int64)
    item_map = np.full(dataset.num_items, -1, dtype=np.int64)
    user_map[kept_users] = np.arange(kept_users.shape[0])
    item_map[kept_items] = np.arange(kept_items.shape[0])

    user_labels = dataset.user_labels
    item_labels = dataset.item_labels
    if user_labels is not None:
        user_labels = tuple(user_labels[u] for u in kept_users)
    if item_labels is not None:
        item_labels = tuple(item_labels[i] for i in kept_items)

    return RatingDataset(
        users=user_map[users[keep]],
        items=item_map[items[keep]],
        ratings=dataset.ratings[keep],
        num_users=kept_users.shape[0],
        num_items=kept_items.shape[0],
        rating_scale=dataset.rating_scale,
        user_labels=user_labels,
        item_labels=item_labels,
    )


def _floor_count(fraction: float, n: int) -> int:
    # floor(fraction * n), snapping to the nearest integer when the float
    # product sits within rounding noise of it (0.7 * 10 must give 7).
    x = fraction * n
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return int(math.floor(x))


def split_per_user(
    dataset: RatingDataset,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> Split:
    """Shuffle each user's interactions and partition them by ``fractions``.

    Rounding: train gets ``floor(f_train * n)``, validation gets
    ``floor(f_val * n)`` but at least 1 when n >= 3, test gets the rest.
    Users whose count cannot populate all three parts go entirely to train
    and are tallied in ``Split.train_only_users``.
    """
    f_train, f_val, _ = check_fractions(fractions)
    rng = np.random.default_rng(seed)

    order = np.argsort(dataset.users, kind="stable")
    sorted_users = dataset.users[order]
    bounds = np.searchsorted(sorted_users, np.arange(dataset.num_users + 1))

    part_masks = [np.zeros(len(dataset), dtype=bool) for _ in range(3)]
    train_only = 0
    for u in range(dataset.num_users):
        rows = order[bounds[u]:bounds[u + 1]]
        n = rows.shape[0]
        if n == 0:
            continue
        rows = rows[rng.permutation(n)]
        n_train = _floor_count(f_train, n)
        n_val = _floor_count(f_val, n)
        if n >= 3 and n_val == 0:
            n_val = 1
        n_test = n - n_train - n_val
        if n < 3 or n_train <= 0 or n_val <= 0 or n_test <= 0:
            part_masks[0][rows] = True
            train_only += 1
            continue
        part_masks[0][rows[:n_train]] = True
        part_masks[1][rows[n_train:n_train + n_val]] = True
        part_masks[2][rows[n_train + n_val:]] = True

    train, validation, test = (dataset.subset(mask) for mask in part_masks)
    return Split(
        train=train,
        validation=validation,
        test=test,
        seed=int(seed),
        train_only_users=train_only,
    )
