"""Uncertainty-adaptive text-video retrieval, from scratch on numpy."""

from .autodiff import Graph, Tensor, finite_difference_check
from .encoders import EmbeddingMatrix, ModelConfig, TokenSequence
from .estimator import UncertaintyRetriever
from .evaluator import RetrievalMetrics, compute_metrics, evaluate, rank_of_ground_truth
from .matching import dsa_similarity, match_attribution, token_wise_similarity
from .objectives import LossWeights, dsa_loss, dua_loss, info_nce, kl_loss, total_loss
from .synthcorpus import Corpus, CorpusConfig, generate_corpus, read_corpus, write_corpus
from .trainer import Checkpoint, TrainConfig, adam_step, lr_schedule, train_run
from .uncertainty import GaussianEmbedding, kl_divergence, reparameterize, uncertainty_level

__all__ = [
    "Checkpoint", "Corpus", "CorpusConfig", "EmbeddingMatrix", "GaussianEmbedding", "Graph", "LossWeights",
    "ModelConfig", "RetrievalMetrics", "Tensor", "TokenSequence", "TrainConfig", "UncertaintyRetriever",
    "adam_step", "compute_metrics", "dsa_loss", "dsa_similarity", "dua_loss", "evaluate",
    "finite_difference_check", "generate_corpus", "info_nce", "kl_divergence", "kl_loss", "lr_schedule",
    "match_attribution", "rank_of_ground_truth", "read_corpus", "reparameterize", "token_wise_similarity",
    "total_loss", "train_run", "uncertainty_level", "write_corpus",
]
__version__ = "0.1.0"
