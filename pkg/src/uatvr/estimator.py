"""scikit-learn style wrapper around training, encoding and retrieval."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evaluator import dsa_matrix, encode_split, evaluate
from .synthcorpus import Corpus
from .trainer import DESK_LR, Checkpoint, TrainConfig, train_run
from .validation import check_fraction, check_nonnegative, check_positive_int, check_token_batch


class UncertaintyRetriever(BaseEstimator):
    """Text-to-video retriever trained on a :class:`~uatvr.synthcorpus.Corpus`.

    ``fit`` trains from scratch; ``transform`` returns Gaussian mean embeddings;
    ``predict`` ranks a video gallery for each text query by token-wise
    similarity over the enlarged token sets.

    Examples
    --------
    >>> from uatvr import CorpusConfig, generate_corpus
    >>> corpus = generate_corpus(CorpusConfig(video_count=20, seed=0))
    >>> model = UncertaintyRetriever(epochs=1, batch_size=8).fit(corpus)
    >>> model.predict(corpus.split_arrays("test")[0][:2], top_k=3).shape
    (2, 3)
    """

    def __init__(self, epochs=5, batch_size=32, lr=DESK_LR, warmup_fraction=0.1, alpha=1e-2, beta=1e-4,
                 k=7, n_video_tokens=3, n_text_tokens=2, dim=32, heads=4, seq_layers=2, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_fraction = warmup_fraction
        self.alpha = alpha
        self.beta = beta
        self.k = k
        self.n_video_tokens = n_video_tokens
        self.n_text_tokens = n_text_tokens
        self.dim = dim
        self.heads = heads
        self.seq_layers = seq_layers
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_int(self.batch_size, "batch_size", minimum=2)
        check_positive_int(self.k, "k", minimum=1)
        check_positive_int(self.n_video_tokens, "n_video_tokens", minimum=0)
        check_positive_int(self.n_text_tokens, "n_text_tokens", minimum=0)
        check_positive_int(self.dim, "dim")
        check_positive_int(self.heads, "heads")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} must be divisible by heads={self.heads}")
        check_fraction(self.warmup_fraction, "warmup_fraction", open_right=False)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=check_nonnegative(self.lr, "lr"),
                           warmup_fraction=self.warmup_fraction, alpha=check_nonnegative(self.alpha, "alpha"),
                           beta=check_nonnegative(self.beta, "beta"), k=self.k,
                           n_video_tokens=self.n_video_tokens, n_text_tokens=self.n_text_tokens,
                           dim=self.dim, heads=self.heads, seq_layers=self.seq_layers, seed=self.seed)

    def fit(self, X: Corpus, y=None) -> "UncertaintyRetriever":
        if not isinstance(X, Corpus):
            raise TypeError(f"fit expects a Corpus, got {type(X).__name__}")
        self.checkpoint_ = train_run(X, self._train_config())
        self.history_ = [log.line() for log in self.checkpoint_.logs]
        self.set_gallery(*X.split_arrays("test")[3:5])
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "UncertaintyRetriever":
        c = ckpt.config
        model = cls(epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, warmup_fraction=c.warmup_fraction,
                    alpha=c.alpha, beta=c.beta, k=c.k, n_video_tokens=c.n_video_tokens,
                    n_text_tokens=c.n_text_tokens, dim=c.dim, heads=c.heads, seq_layers=c.seq_layers, seed=c.seed)
        model.checkpoint_ = ckpt
        model.history_ = [log.line() for log in ckpt.logs]
        return model

    def _check_fitted(self) -> Checkpoint:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("this UncertaintyRetriever is not fitted yet; call fit first")
        return self.checkpoint_

    def set_gallery(self, video_ids, video_mask=None) -> "UncertaintyRetriever":
        ck = self._check_fitted()
        v_ids, v_mask = check_token_batch(video_ids, video_mask, ck.model.video_vocab, ck.model.video_len, "video")
        self.gallery_ = self._encode(None, None, v_ids, v_mask)
        return self

    def _encode(self, t_ids, t_mask, v_ids, v_mask):
        ck = self._check_fitted()
        m = ck.model
        if t_ids is None:
            t_ids, t_mask = np.zeros((1, m.text_len), np.int64), np.zeros((1, m.text_len), bool)
            t_mask[:, 0] = True
        if v_ids is None:
            v_ids, v_mask = np.zeros((1, m.video_len), np.int64), np.ones((1, m.video_len), bool)
        return encode_split(ck.params, m, t_ids, t_mask, v_ids, v_mask)

    def transform(self, X, mask=None, modality: str = "text") -> np.ndarray:
        """Gaussian mean embeddings (n x D) of text or video id rows."""
        ck = self._check_fitted()
        m = ck.model
        if modality == "text":
            ids, mask = check_token_batch(X, mask, m.text_vocab, m.text_len, "text")
            return self._encode(ids, mask, None, None)["text_mu"]
        if modality == "video":
            ids, mask = check_token_batch(X, mask, m.video_vocab, m.video_len, "video")
            return self._encode(None, None, ids, mask)["video_mu"]
        raise ValueError(f"modality must be 'text' or 'video', got {modality!r}")

    def decision_function(self, X, mask=None) -> np.ndarray:
        """Similarity of each text query to every gallery video."""
        ck = self._check_fitted()
        if not hasattr(self, "gallery_"):
            raise NotFittedError("no gallery set; call set_gallery first")
        ids, mask = check_token_batch(X, mask, ck.model.text_vocab, ck.model.text_len, "text")
        enc = dict(self._encode(ids, mask, None, None))
        for key in ("frames", "frame_mask", "video_mu", "video_log_var"):
            enc[key] = self.gallery_[key]
        return dsa_matrix(enc)

    def predict(self, X, mask=None, top_k: int = 10) -> np.ndarray:
        """Gallery row indices of the ``top_k`` best videos per query, best first."""
        top_k = check_positive_int(top_k, "top_k")
        sim = self.decision_function(X, mask)
        order = np.argsort(-sim, axis=1, kind="stable")
        return order[:, :top_k]

    def score(self, X: Corpus, y=None) -> float:
        """Text-to-video R@1 on the corpus test split, as a fraction."""
        ck = self._check_fitted()
        return evaluate(ck.params, ck.model, X, "test", "t2v").metrics.recall[1] / 100.0
