"""Training losses: symmetric InfoNCE, multi-instance InfoNCE over sampled
embeddings, the KL regularizer and their weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import pairwise_token_similarity
from .uncertainty import kl_to_unit_gaussian

MAX_SCALE = 100.0
_MASK_BIAS = -1e9


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-2
    beta: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class BatchBundle:
    """Everything the losses need for one batch of B caption/video pairs.

    Positives are the diagonal pairing: caption i belongs with video i.
    """

    words: Tensor            # B x (N + C_t) x D, rows normalized
    word_mask: np.ndarray
    frames: Tensor           # B x (M + C_v) x D, rows normalized
    frame_mask: np.ndarray
    text_mu: Tensor          # B x D
    text_log_var: Tensor
    video_mu: Tensor
    video_log_var: Tensor
    text_samples: Tensor | None = None   # B x K x D
    video_samples: Tensor | None = None

    @property
    def size(self) -> int:
        return self.words.shape[0]


def logit_scale(log_inv_temp: Tensor) -> Tensor:
    return ad.clamp(ad.exp(log_inv_temp), None, MAX_SCALE)


def _as_scale(scale, dtype) -> Tensor:
    if isinstance(scale, Tensor):
        return scale
    return Tensor(np.asarray(scale, dtype=dtype))


def _diag(x: Tensor) -> Tensor:
    n = x.shape[0]
    return ad.sum(ad.where_rows(x, np.eye(n, dtype=bool)), axis=1)


def info_nce(sim: Tensor, scale, direction: Literal["t2v", "v2t"] = "t2v") -> Tensor:
    """Cross-entropy of the diagonal under a row (t2v) or column (v2t) softmax."""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise LossError(f"similarity matrix must be square, got {sim.shape}")
    logits = ad.mul(sim, _as_scale(scale, sim.dtype))
    axis = {"t2v": 1, "v2t": 0}[direction]
    per_item = ad.sub(ad.logsumexp(logits, axis=axis), _diag(logits))
    return ad.mean(per_item)


def symmetric_info_nce(sim: Tensor, scale) -> Tensor:
    return ad.add(info_nce(sim, scale, "t2v"), info_nce(sim, scale, "v2t"))


def dsa_similarity_matrix(bundle: BatchBundle, validate: bool = True) -> Tensor:
    return pairwise_token_similarity(bundle.words, bundle.word_mask, bundle.frames, bundle.frame_mask, validate)


def dsa_loss(bundle: BatchBundle, scale, sim: Tensor | None = None) -> Tensor:
    if sim is None:
        sim = dsa_similarity_matrix(bundle)
    return symmetric_info_nce(sim, scale)


def _mil_direction(logits: Tensor) -> Tensor:
    """Anchors along axes (0, 1), candidates along (2, 3) of a B x K x B x K logit tensor."""
    b, k = logits.shape[0], logits.shape[1]
    flat = ad.reshape(logits, (b, k, b * k))
    denom = ad.logsumexp(flat, axis=-1)
    own = np.repeat(np.eye(b, dtype=bool), k, axis=1)[:, None, :]
    positives = ad.add(flat, Tensor(np.where(own, 0.0, _MASK_BIAS).astype(logits.dtype)))
    numer = ad.logsumexp(positives, axis=-1)
    # mean over the K anchors of an item, then over items
    return ad.mean(ad.sub(denom, numer))


def dua_directions(text_samples: Tensor, video_samples: Tensor, scale) -> tuple[Tensor, Tensor]:
    """Multi-instance InfoNCE in both directions; samples are B x K x D."""
    if text_samples.shape != video_samples.shape:
        raise LossError(f"sample tensors differ in shape: {text_samples.shape} vs {video_samples.shape}")
    b, k, d = text_samples.shape
    raw = ad.matmul(ad.reshape(text_samples, (b * k, d)), ad.transpose(ad.reshape(video_samples, (b * k, d))))
    logits = ad.mul(ad.reshape(raw, (b, k, b, k)), _as_scale(scale, raw.dtype))
    t_anchor = _mil_direction(logits)
    v_anchor = _mil_direction(ad.transpose(logits, (2, 3, 0, 1)))
    return t_anchor, v_anchor


def dua_loss(bundle: BatchBundle, scale) -> Tensor:
    if bundle.text_samples is None or bundle.video_samples is None:
        raise LossError("bundle carries no probabilistic samples")
    t, v = dua_directions(bundle.text_samples, bundle.video_samples, scale)
    return ad.add(t, v)


def dua_loss_lists(text_samples: list[np.ndarray], video_samples: list[np.ndarray], scale: float) -> float:
    """Convenience form over per-item K x D arrays; every item must have the same K."""
    ks = {np.shape(s)[0] for s in list(text_samples) + list(video_samples)}
    if len(ks) != 1:
        raise LossError(f"every item needs the same number of samples, got K in {sorted(ks)}")
    t = Tensor(np.stack(text_samples).astype(np.float64))
    v = Tensor(np.stack(video_samples).astype(np.float64))
    a, b = dua_directions(t, v, scale)
    return float(a.data + b.data)


def kl_loss(bundle: BatchBundle) -> Tensor:
    per_item = ad.add(kl_to_unit_gaussian(bundle.text_mu, bundle.text_log_var),
                      kl_to_unit_gaussian(bundle.video_mu, bundle.video_log_var))
    return ad.mean(per_item)


def total_loss(bundle: BatchBundle, weights: LossWeights, scale, sim: Tensor | None = None
               ) -> tuple[Tensor, dict[str, float]]:
    """DSA + alpha * DUA + beta * KL, plus a float breakdown for logging.

    Terms with zero weight are reported but kept off the tape, so alpha = beta = 0
    is exactly the DSA loss.
    """
    l_dsa = dsa_loss(bundle, scale, sim)
    total = l_dsa
    breakdown = {"dsa": float(l_dsa.data), "dua": math.nan, "kl": float(kl_loss(bundle).data)}
    if bundle.text_samples is not None:
        l_dua = dua_loss(bundle, scale)
        breakdown["dua"] = float(l_dua.data)
        if weights.alpha > 0:
            total = ad.add(total, ad.mul(l_dua, Tensor(np.asarray(weights.alpha, dtype=l_dsa.dtype))))
    if weights.beta > 0:
        l_kl = kl_loss(bundle)
        total = ad.add(total, ad.mul(l_kl, Tensor(np.asarray(weights.beta, dtype=l_dsa.dtype))))
    breakdown["total"] = float(total.data)
    return total, breakdown
