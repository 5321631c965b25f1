"""End-to-end forward pass: token ids -> enlarged token embeddings + Gaussians."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ModelConfig, append_extra_tokens, encode_batch, init_tower, normalize_rows, seq_transf
from .objectives import BatchBundle
from .uncertainty import init_head, mu_head, reparameterize, sigma_head

LOG_INV_TEMP = "logit.log_inv_temp"


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32, init_scale: float = 100.0,
                init_log_var: float = 0.0) -> dict[str, np.ndarray]:
    """Fresh parameters: Gaussian(0, init_std) weights, unit LayerNorm gains, constant sigma head."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    for modality in ("text", "video"):
        p.update(init_tower(cfg, modality, rng, dtype))
    for modality in ("text", "video"):
        p.update(init_head(modality, cfg.dim, cfg.dim, rng, cfg.init_std, dtype, init_log_var))
    p[LOG_INV_TEMP] = np.asarray(math.log(init_scale), dtype=dtype)
    return p


def to_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def encode_text(p: Mapping[str, Tensor], cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray):
    """Returns (word rows normalized, word mask, pooled [CLS] feature)."""
    x = encode_batch(p, "text", ids, mask, cfg.heads)
    x, m = append_extra_tokens(x, mask, p["text.extra"], p["text.extra_pos"])
    x = seq_transf(x, m, p, "text", cfg.heads)
    c = cfg.n_text_tokens
    b, length, d = x.shape
    pooled = ad.reshape(ad.slice_axis(x, c, c + 1, axis=1), (b, d))
    if cfg.include_cls:
        words, wmask = x, m
    else:
        words = ad.concat([ad.slice_axis(x, 0, c, axis=1), ad.slice_axis(x, c + 1, length, axis=1)], axis=1)
        wmask = np.concatenate([m[:, :c], m[:, c + 1:]], axis=1)
    return normalize_rows(words, wmask), wmask, pooled


def encode_video(p: Mapping[str, Tensor], cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray):
    """Returns (frame rows normalized incl. class tokens, frame mask, mean-pooled frame feature)."""
    x = encode_batch(p, "video", ids, mask, cfg.heads)
    x, m = append_extra_tokens(x, mask, p["video.extra"], p["video.extra_pos"])
    x = seq_transf(x, m, p, "video", cfg.heads)
    c = cfg.n_video_tokens
    frames = ad.slice_axis(x, c, x.shape[1], axis=1)
    count = mask.sum(axis=1, keepdims=True).astype(x.dtype)
    pooled = ad.mul(ad.sum(ad.where_rows(frames, mask[..., None]), axis=1), Tensor(1.0 / count))
    return normalize_rows(x, m), m, pooled


def forward_batch(p: Mapping[str, Tensor], cfg: ModelConfig, text_ids, text_mask, video_ids, video_mask,
                  text_eps: np.ndarray | None = None, video_eps: np.ndarray | None = None) -> BatchBundle:
    words, wmask, t_pooled = encode_text(p, cfg, np.asarray(text_ids), np.asarray(text_mask, dtype=bool))
    frames, fmask, v_pooled = encode_video(p, cfg, np.asarray(video_ids), np.asarray(video_mask, dtype=bool))
    t_mu, t_lv = mu_head(t_pooled, p, "text"), sigma_head(t_pooled, p, "text")
    v_mu, v_lv = mu_head(v_pooled, p, "video"), sigma_head(v_pooled, p, "video")
    t_samples = reparameterize(t_mu, t_lv, text_eps) if text_eps is not None else None
    v_samples = reparameterize(v_mu, v_lv, video_eps) if video_eps is not None else None
    return BatchBundle(words, wmask, frames, fmask, t_mu, t_lv, v_mu, v_lv, t_samples, v_samples)
