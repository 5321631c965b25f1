"""Deterministic text-video similarity functions.

The token-wise score of a caption and a video is

    s = 1/2 * ( mean_n max_m <w_n, f_m>  +  mean_m max_n <w_n, f_m> )

over unmasked word rows ``w`` and frame rows ``f``. The DSA score is the same
function applied to the sets enlarged with learnable class tokens, so both
share :func:`pairwise_token_similarity`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EmbeddingMatrix

NORM_TOL = 1e-4
_MASK_BIAS = -1e9


class MatchingError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    row_ids: list = field(default_factory=list)
    col_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not self.row_ids:
            self.row_ids = list(range(self.values.shape[0]))
        if not self.col_ids:
            self.col_ids = list(range(self.values.shape[1]))


@dataclass
class Attribution:
    frame_weights: np.ndarray
    word_weights: np.ndarray
    matched_pairs: list[tuple[int, int, float]]


def _rows(x: EmbeddingMatrix) -> Tensor:
    return x.rows if isinstance(x.rows, Tensor) else Tensor(np.asarray(x.rows, dtype=np.float64))


def check_normalized(rows: np.ndarray, mask: np.ndarray, what: str = "input") -> None:
    norms = np.sqrt((rows * rows).sum(axis=-1))
    bad = mask & (np.abs(norms - 1.0) > NORM_TOL)
    if bad.any():
        raise MatchingError(f"{what}: {int(bad.sum())} unmasked row(s) not unit-normalized "
                            f"(max |norm-1| = {np.abs(norms - 1.0)[bad].max():.3g})")
    if not mask.any(axis=-1).all():
        raise MatchingError(f"{what}: every sequence needs at least one unmasked row")


def pairwise_token_similarity(words: Tensor, word_mask: np.ndarray, frames: Tensor, frame_mask: np.ndarray,
                              validate: bool = True) -> Tensor:
    """Token-wise max-mean similarity for every (caption, video) pair.

    ``words`` is Bt x N x D, ``frames`` is Bv x M x D (rows unit-normalized);
    returns a Bt x Bv Tensor.
    """
    word_mask = np.asarray(word_mask, dtype=bool)
    frame_mask = np.asarray(frame_mask, dtype=bool)
    if validate:
        check_normalized(words.data, word_mask, "words")
        check_normalized(frames.data, frame_mask, "frames")
    bt, n, d = words.shape
    bv, m, d2 = frames.shape
    if d != d2:
        raise ad.ShapeError("pairwise_token_similarity", d, d2)
    s = ad.matmul(ad.reshape(words, (bt * n, d)), ad.transpose(ad.reshape(frames, (bv * m, d))))
    s = ad.transpose(ad.reshape(s, (bt, n, bv, m)), (0, 2, 1, 3))
    pair = word_mask[:, None, :, None] & frame_mask[None, :, None, :]
    s = ad.add(s, Tensor(np.where(pair, 0.0, _MASK_BIAS).astype(s.dtype)))

    dtype = s.dtype
    w_count = word_mask.sum(axis=1).astype(dtype)
    f_count = frame_mask.sum(axis=1).astype(dtype)
    word_best = ad.where_rows(ad.max(s, axis=3), word_mask[:, None, :])
    frame_best = ad.where_rows(ad.max(s, axis=2), frame_mask[None, :, :])
    t_term = ad.mul(ad.sum(word_best, axis=2), Tensor((1.0 / w_count)[:, None]))
    v_term = ad.mul(ad.sum(frame_best, axis=2), Tensor((1.0 / f_count)[None, :]))
    return ad.mul(ad.add(t_term, v_term), Tensor(np.asarray(0.5, dtype=dtype)))


def _pair_score(words: EmbeddingMatrix, frames: EmbeddingMatrix) -> Tensor:
    w, f = _rows(words), _rows(frames)
    out = pairwise_token_similarity(ad.reshape(w, (1,) + w.shape), words.mask[None, :],
                                    ad.reshape(f, (1,) + f.shape), frames.mask[None, :])
    return ad.reshape(out, ())


def token_wise_similarity(words: EmbeddingMatrix, frames: EmbeddingMatrix) -> float:
    """Max-mean score of one caption (without its [CLS] row) against one video."""
    return float(_pair_score(words, frames).data)


def dsa_similarity(words: EmbeddingMatrix, frames: EmbeddingMatrix) -> float:
    """Score over enlarged sets (words + C_t class tokens, frames + C_v class tokens).

    Class tokens are ordinary set members, so this is the token-wise score
    evaluated on the enlarged rows.
    """
    return float(_pair_score(words, frames).data)


def mean_pool_video(frames: EmbeddingMatrix) -> np.ndarray:
    if not frames.mask.any():
        raise MatchingError("mean pooling needs at least one unmasked frame")
    return frames.data[frames.mask].mean(axis=0)


def cls_text(words: EmbeddingMatrix) -> np.ndarray:
    if not words.mask[0]:
        raise MatchingError("[CLS] row (position 0) is masked")
    return words.data[0].copy()


def global_similarity(t: np.ndarray, v: np.ndarray) -> float:
    t, v = np.asarray(t), np.asarray(v)
    if t.shape != v.shape:
        raise ad.ShapeError("global_similarity", t.shape, v.shape)
    return float(t @ v)


def batch_similarity(texts: Sequence, videos: Sequence, scorer: Callable[[object, object], float]) -> SimilarityMatrix:
    if len(texts) != len(videos):
        raise MatchingError(f"batch sizes differ: {len(texts)} texts vs {len(videos)} videos")
    values = np.array([[scorer(t, v) for v in videos] for t in texts], dtype=np.float64)
    return SimilarityMatrix(values)


def match_attribution(words: EmbeddingMatrix, frames: EmbeddingMatrix) -> Attribution:
    """Per-token weights: each token's best cross-modal match, shifted by +1 and normalized."""
    w, f = words.data, frames.data
    sims = w @ f.T
    pair = words.mask[:, None] & frames.mask[None, :]
    sims = np.where(pair, sims, -np.inf)

    def weights(best, mask):
        shifted = np.where(mask, np.maximum(best + 1.0, 0.0), 0.0)
        total = shifted.sum()
        if total <= 0:
            return mask / mask.sum()
        return shifted / total

    frame_best = sims.max(axis=0)
    word_best = sims.max(axis=1)
    pairs = []
    for n in np.flatnonzero(words.mask):
        m = int(np.argmax(sims[n]))
        pairs.append((int(n), m, float(sims[n, m])))
    for m in np.flatnonzero(frames.mask):
        n = int(np.argmax(sims[:, m]))
        pairs.append((n, int(m), float(sims[n, m])))
    return Attribution(weights(frame_best, frames.mask), weights(word_best, words.mask), pairs)
