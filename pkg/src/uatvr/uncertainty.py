"""Gaussian representations of pooled text/video features.

A pooled feature is mapped by two heads to a diagonal Gaussian: the mean head
is ``l2normalize(LayerNorm(W x + b))`` and the variance head is a bare affine
map read as log-variance, clamped to ``[-10, 10]``. K probabilistic embeddings
are drawn with the reparameterization ``sigma * eps + mu``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

HEAD_KEYS = ("mu_w", "mu_b", "mu_ln_g", "mu_ln_b", "sigma_w", "sigma_b")


@dataclass
class GaussianEmbedding:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * np.asarray(self.log_var))


@dataclass
class SampleSet:
    samples: np.ndarray
    source_noise: np.ndarray


def init_head(modality: str, d_in: int, d: int, rng: np.random.Generator, std: float = 0.02,
              dtype=np.float32, init_log_var: float = 0.0) -> dict[str, np.ndarray]:
    # zero sigma weights: every item starts at the same sigma = exp(0.5 * init_log_var)
    p = {
        "mu_w": rng.normal(0, std, (d_in, d)), "mu_b": np.zeros(d),
        "mu_ln_g": np.ones(d), "mu_ln_b": np.zeros(d),
        "sigma_w": np.zeros((d_in, d)), "sigma_b": np.full(d, init_log_var),
    }
    return {f"{modality}.head.{k}": np.asarray(p[k], dtype=dtype) for k in HEAD_KEYS}


def _t(p, key):
    v = p[key]
    return v if isinstance(v, Tensor) else Tensor(v)


def mu_head(pooled: Tensor, p: Mapping[str, Tensor], modality: str) -> Tensor:
    h = ad.add(ad.matmul(pooled, _t(p, f"{modality}.head.mu_w")), _t(p, f"{modality}.head.mu_b"))
    h = ad.layer_norm(h, _t(p, f"{modality}.head.mu_ln_g"), _t(p, f"{modality}.head.mu_ln_b"))
    return ad.l2_normalize(h)


def sigma_head(pooled: Tensor, p: Mapping[str, Tensor], modality: str, clamp: bool = True) -> Tensor:
    """Log-variance output of the variance head."""
    out = ad.add(ad.matmul(pooled, _t(p, f"{modality}.head.sigma_w")), _t(p, f"{modality}.head.sigma_b"))
    return ad.clamp(out, LOGVAR_MIN, LOGVAR_MAX) if clamp else out


def noise(seed: int, epoch: int, batch: int, item: int, stream: int, k: int, d: int, dtype=np.float64) -> np.ndarray:
    """K x D standard-normal draws from a counter-based generator keyed by its arguments.

    ``stream`` separates the text (0) and video (1) draws of the same item.
    """
    key = np.random.SeedSequence([seed, epoch, batch, item, stream]).generate_state(2, np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((k, d)).astype(dtype)


def reparameterize(mu: Tensor, log_var: Tensor, eps: np.ndarray) -> Tensor:
    """``mu``/``log_var`` are B x D, ``eps`` is B x K x D; returns B x K x D samples."""
    if eps.ndim != 3 or eps.shape[0] != mu.shape[0] or eps.shape[2] != mu.shape[1]:
        raise ad.ShapeError("reparameterize", (mu.shape[0], "K", mu.shape[1]), eps.shape)
    b, d = mu.shape
    sigma = ad.exp(ad.mul(log_var, Tensor(np.asarray(0.5, dtype=mu.dtype))))
    return ad.add(ad.mul(ad.reshape(sigma, (b, 1, d)), Tensor(eps.astype(mu.dtype, copy=False))),
                  ad.reshape(mu, (b, 1, d)))


def sample_embeddings(g: GaussianEmbedding, k: int, rng: np.random.Generator | None = None,
                      eps: np.ndarray | None = None) -> SampleSet:
    if k < 1:
        raise ValueError(f"sample count K must be >= 1, got {k}")
    mu = np.asarray(g.mu, dtype=np.float64)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = rng.standard_normal((k, mu.shape[0]))
    lv = np.clip(np.asarray(g.log_var, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
    out = reparameterize(Tensor(mu[None]), Tensor(lv[None]), eps[None])
    return SampleSet(out.data[0], eps)


def kl_to_unit_gaussian(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) over the last axis."""
    inner = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(log_var)), log_var)
    inner = ad.sub(inner, Tensor(np.asarray(1.0, dtype=mu.dtype)))
    return ad.mul(ad.sum(inner, axis=-1), Tensor(np.asarray(0.5, dtype=mu.dtype)))


def kl_divergence(g: GaussianEmbedding) -> float:
    return float(kl_to_unit_gaussian(Tensor(np.asarray(g.mu, dtype=float)),
                                     Tensor(np.asarray(g.log_var, dtype=float))).data)


def uncertainty_level(log_var: np.ndarray) -> np.ndarray | float:
    """Geometric mean of sigma over the last axis."""
    lv = np.asarray(log_var, dtype=np.float64)
    out = np.exp((0.5 * lv).mean(axis=-1))
    return float(out) if out.ndim == 0 else out
