"""Mini-batch training of the propagation backbone.

Objectives
----------
``cost_sensitive_ce``
    Per train edge, one uniformly sampled negative item. Positive and
    negative branches of the binary cross-entropy are reweighted with
    (1 - lambda) and (1 + lambda): raising lambda makes it cheaper to
    under-score observed interactions and costlier to over-score sampled
    negatives.
``plain_ce``
    Same pipeline with both weights fixed at 1 (identical to lambda = 0).
``bpr``
    Pairwise log-sigmoid ranking loss between the positive and the sampled
    negative, the usual comparison arm.

Each epoch visits every train edge exactly once in seeded, shuffled batches.
Probabilities are clamped to [1e-7, 1 - 1e-7] before logs, and the analytic
gradients are those of the clamped loss (zero in the clamped region).

Early stopping tracks validation NDCG; training halts once the metric has
not improved for ``patience`` consecutive epochs and the best checkpoint is
returned.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from fairgcf.data import Split
from fairgcf.graph import BipartiteGraph, build_graph
from fairgcf.metrics import corpus_ndcg
from fairgcf.propagation import (
    EmbeddingState,
    forward,
    init_embeddings,
    propagate_gradient,
    scatter_pair_gradients,
    score_pairs,
)
from fairgcf.seeding import stream_rng
from fairgcf.validation import check_positive_int, check_unit_interval

OBJECTIVES = ("cost_sensitive_ce", "plain_ce", "bpr")
OPTIMIZERS = ("adam", "sgd")
REFRESH_MODES = ("batch", "epoch")

PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    """Raised when the optimization loop encounters non-finite values."""


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    lambda_: float = 0.1
    gamma: int = 20
    dim: int = 64
    n_layers: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    objective: str = "cost_sensitive_ce"
    val_cutoff: int = 100
    optimizer: str = "adam"
    propagation_refresh: str = "batch"

    def __post_init__(self):
        check_unit_interval(self.lambda_, "lambda_")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        check_positive_int(self.dim, "dim")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.max_epochs, "max_epochs")
        check_positive_int(self.patience, "patience")
        check_positive_int(self.val_cutoff, "val_cutoff")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.propagation_refresh not in REFRESH_MODES:
            raise ValueError(
                f"propagation_refresh must be one of {REFRESH_MODES}, "
                f"got {self.propagation_refresh!r}"
            )

    def effective_lambda(self) -> float:
        """Cost weight actually applied; plain CE always runs at 0."""
        return self.lambda_ if self.objective == "cost_sensitive_ce" else 0.0


@dataclass
class TrainTrace:
    """Per-epoch history plus the best checkpoint seen."""

    losses: list[float] = field(default_factory=list)
    val_ndcg: list[float] = field(default_factory=list)
    epochs_since_best: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    best_state: EmbeddingState | None = None

    @property
    def n_epochs(self) -> int:
        return len(self.losses)

    @property
    def best_val_ndcg(self) -> float:
        return self.val_ndcg[self.best_epoch - 1]

    def to_tsv(self) -> str:
        lines = ["epoch\tloss\tval_ndcg\tseconds"]
        for e in range(self.n_epochs):
            lines.append(
                f"{e + 1}\t{self.losses[e]!r}\t{self.val_ndcg[e]!r}\t{self.seconds[e]:.6f}"
            )
        return "\n".join(lines) + "\n"


class GradientDescent:
    """Plain fixed-step gradient descent."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.learning_rate * grad


class Adam:
    """Adam with the standard moment constants."""

    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = None
        self._v = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    return GradientDescent(config.learning_rate)


def sample_negative(u: int, graph: BipartiteGraph, rng: np.random.Generator) -> int:
    """One item outside user ``u``'s train profile, uniform via rejection."""
    owned = graph.user_items(u)
    if owned.shape[0] >= graph.num_items:
        raise ValueError(f"user {u} interacted with every item; no negative exists")
    while True:
        j = int(rng.integers(graph.num_items))
        pos = np.searchsorted(owned, j)
        if pos >= owned.shape[0] or owned[pos] != j:
            return j


def sample_negatives(users, graph: BipartiteGraph, rng: np.random.Generator) -> np.ndarray:
    """Batch negative sampling with the same per-pair uniform semantics."""
    users = np.asarray(users, dtype=np.int64)
    if users.size and graph.user_degree[np.unique(users)].max() >= graph.num_items:
        raise ValueError("a user in the batch interacted with every item")
    keys = graph.pair_keys
    n_items = graph.num_items
    js = rng.integers(0, n_items, size=users.shape[0])
    base = users * n_items
    pending = [t for t in range(users.shape[0]) if int(base[t] + js[t]) in keys]
    while pending:
        redraw = rng.integers(0, n_items, size=len(pending))
        js[pending] = redraw
        pending = [t for t in pending if int(base[t] + js[t]) in keys]
    return js


def _clip_prob(prob):
    return np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)


def pair_ce_losses(prob_pos, prob_neg):
    """Cross-entropy branches: -log p for positives, -log(1 - p) for negatives."""
    loss_pos = -np.log(_clip_prob(np.asarray(prob_pos, dtype=np.float64)))
    loss_neg = -np.log1p(-_clip_prob(np.asarray(prob_neg, dtype=np.float64)))
    return loss_pos, loss_neg


def cost_sensitive_combine(loss_pos, loss_neg, lambda_: float):
    """Total loss (1 - lambda) * positive branch + (1 + lambda) * negative branch."""
    check_unit_interval(lambda_, "lambda_")
    return (1.0 - lambda_) * np.asarray(loss_pos) + (1.0 + lambda_) * np.asarray(loss_neg)


def ce_pair_grads(prob_pos, prob_neg):
    """d(branch loss)/d(raw score); zero wherever the probability is clamped."""
    prob_pos = np.asarray(prob_pos, dtype=np.float64)
    prob_neg = np.asarray(prob_neg, dtype=np.float64)
    live_pos = (prob_pos > PROB_EPS) & (prob_pos < 1.0 - PROB_EPS)
    live_neg = (prob_neg > PROB_EPS) & (prob_neg < 1.0 - PROB_EPS)
    grad_pos = np.where(live_pos, prob_pos - 1.0, 0.0)
    grad_neg = np.where(live_neg, prob_neg, 0.0)
    return grad_pos, grad_neg


def bpr_pair_loss(raw_pos, raw_neg):
    """-log sigmoid(raw_pos - raw_neg), computed stably."""
    margin = np.asarray(raw_pos, dtype=np.float64) - np.asarray(raw_neg, dtype=np.float64)
    return np.logaddexp(0.0, -margin)


def bpr_pair_grads(raw_pos, raw_neg):
    margin = np.asarray(raw_pos, dtype=np.float64) - np.asarray(raw_neg, dtype=np.float64)
    s = expit(margin)
    return s - 1.0, 1.0 - s


def train_epoch(
    h0: np.ndarray,
    graph: BipartiteGraph,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer,
) -> tuple[np.ndarray, float]:
    """One pass over all train edges; returns updated embeddings and the
    summed loss over pairs.

    ``propagation_refresh="batch"`` re-propagates before every batch so each
    update uses exact current gradients. ``"epoch"`` propagates once,
    accumulates the gradient over all batches and applies a single update,
    which keeps the epoch cost linear in the number of edges.
    """
    if graph.num_edges == 0:
        raise TrainingError("cannot train on a graph with no edges")
    perm = rng.permutation(graph.num_edges)
    lam = config.effective_lambda()
    per_batch = config.propagation_refresh == "batch"

    state = None
    grad_accum = None
    if not per_batch:
        state = forward(h0, graph, config.n_layers)
        grad_accum = np.zeros_like(state.final)

    total_loss = 0.0
    for b, lo in enumerate(range(0, perm.shape[0], config.batch_size)):
        idx = perm[lo:lo + config.batch_size]
        users = graph.users[idx]
        positives = graph.items[idx]
        negatives = sample_negatives(users, graph, rng)

        if per_batch:
            state = forward(h0, graph, config.n_layers)

        raw_pos, prob_pos = score_pairs(state, users, positives)
        raw_neg, prob_neg = score_pairs(state, users, negatives)

        if config.objective == "bpr":
            batch_loss = float(np.sum(bpr_pair_loss(raw_pos, raw_neg)))
            grad_pos, grad_neg = bpr_pair_grads(raw_pos, raw_neg)
        else:
            loss_pos, loss_neg = pair_ce_losses(prob_pos, prob_neg)
            batch_loss = float(np.sum(cost_sensitive_combine(loss_pos, loss_neg, lam)))
            grad_pos, grad_neg = ce_pair_grads(prob_pos, prob_neg)
            grad_pos = (1.0 - lam) * grad_pos
            grad_neg = (1.0 + lam) * grad_neg

        if not np.isfinite(batch_loss):
            raise TrainingError(f"non-finite loss in batch {b}")
        total_loss += batch_loss

        pair_users = np.concatenate([users, users])
        pair_items = np.concatenate([positives, negatives])
        pair_grads = np.concatenate([grad_pos, grad_neg])
        if per_batch:
            grad_final = scatter_pair_gradients(state, pair_users, pair_items, pair_grads)
            grad_h0 = propagate_gradient(grad_final, graph, config.n_layers)
            h0 = optimizer.step(h0, grad_h0)
        else:
            scatter_pair_gradients(state, pair_users, pair_items, pair_grads, out=grad_accum)

    if not per_batch:
        grad_h0 = propagate_gradient(grad_accum, graph, config.n_layers)
        h0 = optimizer.step(h0, grad_h0)
    return h0, total_loss


def fit(
    split: Split, config: TrainConfig, graph: BipartiteGraph | None = None
) -> tuple[EmbeddingState, TrainTrace]:
    """Train on the split's train graph with early stopping on validation NDCG.

    ``graph`` lets the caller hand in a pre-filtered training graph; when
    omitted the unfiltered train split is used. Candidate rankings for the
    validation metric exclude each user's train items.
    """
    if graph is None:
        graph = build_graph(split.train)
    if len(split.validation) == 0:
        raise ValueError("validation set is empty")

    init_rng = stream_rng(config.seed, "init")
    sampling_rng = stream_rng(config.seed, "sampling")
    h0 = init_embeddings(graph.num_nodes, config.dim, init_rng)
    optimizer = make_optimizer(config)

    train_items = split.train.items_by_user()
    val_items = split.validation.items_by_user()

    trace = TrainTrace()
    best_ndcg = -np.inf
    best_h0 = h0.copy()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        h0, loss = train_epoch(h0, graph, config, sampling_rng, optimizer)
        state = forward(h0, graph, config.n_layers)
        ndcg = corpus_ndcg(state, val_items, train_items, config.val_cutoff)
        if ndcg > best_ndcg:
            best_ndcg = ndcg
            best_h0 = h0.copy()
            since_best = 0
            trace.best_epoch = epoch
        else:
            since_best += 1
        trace.losses.append(loss)
        trace.val_ndcg.append(ndcg)
        trace.epochs_since_best.append(since_best)
        trace.seconds.append(time.perf_counter() - started)
        if since_best >= config.patience:
            break

    best_state = forward(best_h0, graph, config.n_layers)
    trace.best_state = best_state
    return best_state, trace
