"""Light graph convolution: linear neighborhood averaging without feature
transforms or non-linearities.

Layer update: H^(k+1) = S H^(k) with S = D^{-1/2} A D^{-1/2}, no self loops.
The embedding used for scoring is the uniform mean of layers 0..K. Because
the propagation is linear and S is symmetric, the exact gradient of any
batch loss with respect to the initial embeddings is the same operator
applied to the scattered per-pair gradients, which keeps backward at the
same sparse cost as forward.

Checkpoint format (stable): a NumPy ``.npz`` archive with arrays ``h0``
(num_nodes x dim) and ``final`` (num_nodes x dim) plus scalar fields
``num_users``, ``num_items``, ``n_layers``, ``dim`` and ``seed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from fairgcf.graph import BipartiteGraph
from fairgcf.validation import as_rng, check_nonnegative_int, check_positive_int


class PropagationError(RuntimeError):
    """Raised when propagation produces non-finite values."""


@dataclass(eq=False)
class EmbeddingState:
    """Embeddings produced by one forward pass over a fixed graph.

    ``per_layer`` holds H^(0)..H^(K); ``final`` is their mean. States loaded
    from a checkpoint carry ``per_layer=None``. Immutable by convention.
    """

    num_users: int
    num_items: int
    n_layers: int
    dim: int
    h0: np.ndarray
    final: np.ndarray
    per_layer: list[np.ndarray] | None = None

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def user_final(self) -> np.ndarray:
        return self.final[: self.num_users]

    @property
    def item_final(self) -> np.ndarray:
        return self.final[self.num_users:]


@dataclass(frozen=True)
class ScorePair:
    u: int
    i: int
    raw: float
    prob: float


def xavier_bound(dim: int) -> float:
    """Uniform init bound sqrt(6 / (fan_in + fan_out)) with fan_in = fan_out = dim."""
    return math.sqrt(6.0 / (dim + dim))


def init_embeddings(num_nodes: int, dim: int, seed) -> np.ndarray:
    """Xavier-uniform initial embeddings, deterministic for a fixed seed."""
    check_positive_int(num_nodes, "num_nodes")
    check_positive_int(dim, "dim")
    rng = as_rng(seed)
    bound = xavier_bound(dim)
    return rng.uniform(-bound, bound, size=(num_nodes, dim))


def forward(h0: np.ndarray, graph: BipartiteGraph, n_layers: int) -> EmbeddingState:
    """Run ``n_layers`` propagation steps and average all layers."""
    check_nonnegative_int(n_layers, "n_layers")
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape[0] != graph.num_nodes:
        raise ValueError(
            f"h0 has {h0.shape[0]} rows but the graph has {graph.num_nodes} nodes"
        )
    layers = [h0]
    current = h0
    for _ in range(n_layers):
        current = graph.norm_adjacency @ current
        layers.append(current)
    final = sum(layers) / (n_layers + 1)
    if not np.isfinite(final).all():
        raise PropagationError("non-finite values encountered during propagation")
    return EmbeddingState(
        num_users=graph.num_users,
        num_items=graph.num_items,
        n_layers=n_layers,
        dim=h0.shape[1],
        h0=h0,
        final=final,
        per_layer=layers,
    )


def score(state: EmbeddingState, u: int, i: int) -> ScorePair:
    """Dot-product score of (user, item) squashed to a probability."""
    if not 0 <= u < state.num_users:
        raise ValueError(f"user id {u} out of range")
    if not 0 <= i < state.num_items:
        raise ValueError(f"item id {i} out of range")
    raw = float(state.final[u] @ state.final[state.num_users + i])
    return ScorePair(u=u, i=i, raw=raw, prob=float(expit(raw)))


def score_pairs(state: EmbeddingState, users, items) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized raw scores and probabilities for aligned (user, item) arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    raw = np.einsum(
        "ij,ij->i", state.final[users], state.final[state.num_users + items]
    )
    return raw, expit(raw)


def scatter_pair_gradients(
    state: EmbeddingState, users, items, grad_raw, out: np.ndarray | None = None
) -> np.ndarray:
    """Accumulate d(loss)/d(final) from per-pair d(loss)/d(raw) values."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    grad_raw = np.asarray(grad_raw, dtype=np.float64)
    if users.shape != items.shape or users.shape != grad_raw.shape:
        raise ValueError("users, items and grad_raw must be aligned 1-d arrays")
    if users.size and (users.min() < 0 or users.max() >= state.num_users):
        raise ValueError("user id out of range in gradient batch")
    if items.size and (items.min() < 0 or items.max() >= state.num_items):
        raise ValueError("item id out of range in gradient batch")
    if out is None:
        out = np.zeros_like(state.final)
    item_nodes = state.num_users + items
    np.add.at(out, users, grad_raw[:, None] * state.final[item_nodes])
    np.add.at(out, item_nodes, grad_raw[:, None] * state.final[users])
    return out


def propagate_gradient(
    grad_final: np.ndarray, graph: BipartiteGraph, n_layers: int
) -> np.ndarray:
    """Pull a gradient w.r.t. the layer-averaged output back to H^(0).

    The operator is symmetric, so the transpose chain rule reduces to the
    forward recurrence applied to the gradient.
    """
    acc = grad_final.copy()
    current = grad_final
    for _ in range(n_layers):
        current = graph.norm_adjacency @ current
        acc += current
    return acc / (n_layers + 1)


def backward(
    state: EmbeddingState, graph: BipartiteGraph, users, items, grad_raw
) -> np.ndarray:
    """Exact d(loss)/d(H^(0)) for a batch of scored pairs.

    ``grad_raw`` holds d(loss)/d(raw score) per pair. Cost matches forward.
    """
    grad_final = scatter_pair_gradients(state, users, items, grad_raw)
    return propagate_gradient(grad_final, graph, state.n_layers)


def save_checkpoint(path, state: EmbeddingState, seed: int = 0) -> None:
    """Persist a trained state in the documented ``.npz`` layout."""
    np.savez(
        path,
        h0=state.h0,
        final=state.final,
        num_users=np.int64(state.num_users),
        num_items=np.int64(state.num_items),
        n_layers=np.int64(state.n_layers),
        dim=np.int64(state.dim),
        seed=np.int64(seed),
    )


def load_checkpoint(path) -> tuple[EmbeddingState, int]:
    with np.load(path) as payload:
        state = EmbeddingState(
            num_users=int(payload["num_users"]),
            num_items=int(payload["num_items"]),
            n_layers=int(payload["n_layers"]),
            dim=int(payload["dim"]),
            h0=payload["h0"],
            final=payload["final"],
            per_layer=None,
        )
        seed = int(payload["seed"])
    return state, seed
