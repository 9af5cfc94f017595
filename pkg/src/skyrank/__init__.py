"""Cross-view re-ranking: curate hard candidates, train a LoRA-adapted pointwise scorer, re-rank retrieval results."""

from .curation import RankDataset, RankSample, build_rank_dataset, build_rank_sample, curate_candidates
from .embedding import Embedding, Gallery, RetrievalResult, View, build_gallery, cosine_similarity, l2_normalize, retrieve_top_m
from .errors import DataError, DegenerateInputError, DimensionMismatchError, NumericError, SkyrankError, ValidationError
from .evaluation import EvalReport, average_precision, evaluate_run, recall_at_k
from .rerank import RerankResult, batch_rerank_run, rerank, rerank_run
from .scorer import ScorerConfig, ScorerParams, forward_score, init_params, load_checkpoint, save_checkpoint
from .synthgen import SynthWorld, WorldConfig, generate_world
from .training import TrainConfig, TrainReport, bce_with_logits, compute_soft_labels, train

__version__ = "0.1.0"

__all__ = [
    "RankDataset",
    "RankSample",
    "build_rank_dataset",
    "build_rank_sample",
    "curate_candidates",
    "Embedding",
    "Gallery",
    "RetrievalResult",
    "View",
    "build_gallery",
    "cosine_similarity",
    "l2_normalize",
    "retrieve_top_m",
    "DataError",
    "DegenerateInputError",
    "DimensionMismatchError",
    "NumericError",
    "SkyrankError",
    "ValidationError",
    "EvalReport",
    "average_precision",
    "evaluate_run",
    "recall_at_k",
    "RerankResult",
    "batch_rerank_run",
    "rerank",
    "rerank_run",
    "ScorerConfig",
    "ScorerParams",
    "forward_score",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "SynthWorld",
    "WorldConfig",
    "generate_world",
    "TrainConfig",
    "TrainReport",
    "bce_with_logits",
    "compute_soft_labels",
    "train",
]
