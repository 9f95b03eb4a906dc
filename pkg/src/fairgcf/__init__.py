"""Fairness-aware graph collaborative filtering.

A light graph convolution recommender trained by cost-sensitive edge
classification, with a quality-aware filter that separates genuinely
low-quality long-tail items from items merely starved of exposure, and an
evaluation harness covering ranking utility and popularity-fairness
metrics.
"""

from fairgcf.data import (
    EmptyDatasetError,
    IngestionError,
    RatingDataset,
    Split,
    k_core_filter,
    load_interactions,
    split_per_user,
)
from fairgcf.estimator import FairLightGCN
from fairgcf.graph import BipartiteGraph, build_graph, graph_from_edges
from fairgcf.metrics import (
    EvalReport,
    GroupAssignment,
    RankedList,
    evaluate_split,
    rank_all,
    spearman,
)
from fairgcf.propagation import (
    EmbeddingState,
    ScorePair,
    backward,
    forward,
    init_embeddings,
    load_checkpoint,
    save_checkpoint,
    score,
)
from fairgcf.quality import (
    BaselineModel,
    FilterReport,
    edge_error,
    filter_low_quality,
    fit_baseline,
)
from fairgcf.training import TrainConfig, TrainTrace, TrainingError, fit

__version__ = "0.1.0"

__all__ = [
    "BaselineModel",
    "BipartiteGraph",
    "EmbeddingState",
    "EmptyDatasetError",
    "EvalReport",
    "FairLightGCN",
    "FilterReport",
    "GroupAssignment",
    "IngestionError",
    "RankedList",
    "RatingDataset",
    "ScorePair",
    "Split",
    "TrainConfig",
    "TrainTrace",
    "TrainingError",
    "backward",
    "build_graph",
    "edge_error",
    "evaluate_split",
    "filter_low_quality",
    "fit",
    "fit_baseline",
    "forward",
    "graph_from_edges",
    "init_embeddings",
    "k_core_filter",
    "load_checkpoint",
    "load_interactions",
    "rank_all",
    "save_checkpoint",
    "score",
    "spearman",
    "split_per_user",
]
