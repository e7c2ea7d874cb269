"""Probabilistic token-level cross-modal retrieval with optimal transport.

Token features are refined through per-token Gaussians, matched with a fused
token-wise score plus an entropic OT term, and trained with symmetric InfoNCE.
"""

from .data import CorpusSpec, PairedSample, generate_corpus, load_features, write_features
from .metrics import RetrievalReport, evaluate_matrix, metrics, rank_matrix
from .model import RetrievalModel
from .ot import Marginals, TransportPlan, sinkhorn, sinkhorn_batch
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CorpusSpec",
    "Marginals",
    "PairedSample",
    "RetrievalModel",
    "RetrievalReport",
    "TrainConfig",
    "TransportPlan",
    "evaluate",
    "evaluate_matrix",
    "generate_corpus",
    "load_checkpoint",
    "load_features",
    "metrics",
    "rank_matrix",
    "save_checkpoint",
    "sinkhorn",
    "sinkhorn_batch",
    "train",
    "write_features",
]
