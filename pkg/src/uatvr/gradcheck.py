"""Reference gradient check of the full training objective.

A tiny double-precision model (B=3, K=2, D=4, one extra token per modality)
with frozen noise. Weights are drawn at a scale where every gradient entry is
well above finite-difference noise, and the inverse temperature sits below its
clamp so it receives a gradient too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import FDResult, finite_difference_check
from .encoders import ModelConfig
from .model import LOG_INV_TEMP, forward_batch, init_params
from .objectives import LossWeights, logit_scale, total_loss

GRADCHECK_TOL = 1e-5


@dataclass
class GradcheckProblem:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    text_ids: np.ndarray
    text_mask: np.ndarray
    video_ids: np.ndarray
    video_mask: np.ndarray
    text_eps: np.ndarray
    video_eps: np.ndarray
    weights: LossWeights

    def loss(self, **p):
        bundle = forward_batch(p, self.cfg, self.text_ids, self.text_mask, self.video_ids, self.video_mask,
                               self.text_eps, self.video_eps)
        return total_loss(bundle, self.weights, logit_scale(p[LOG_INV_TEMP]))[0]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.params.values())


def make_problem(seed: int = 0, batch: int = 3, k: int = 2, dim: int = 4, n_video_tokens: int = 1,
                 n_text_tokens: int = 1, weights: LossWeights = LossWeights()) -> GradcheckProblem:
    cfg = ModelConfig(dim=dim, heads=2, text_vocab=8, video_vocab=8, text_len=5, video_len=4,
                      backbone_layers=1, seq_layers=1, n_text_tokens=n_text_tokens,
                      n_video_tokens=n_video_tokens, init_std=0.5)
    p = init_params(cfg, seed, dtype=np.float64, init_scale=5.0)
    rng = np.random.default_rng([seed, 1])
    for name in p:
        leaf = name.rsplit(".", 1)[-1]
        if "sigma" in leaf:
            p[name] = rng.normal(0, 0.3, p[name].shape)
        elif leaf.endswith("_g"):
            p[name] = 1 + rng.normal(0, 0.3, p[name].shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            p[name] = rng.normal(0, 0.3, p[name].shape)
    p[LOG_INV_TEMP] = np.asarray(math.log(5.0))
    text_ids = rng.integers(2, cfg.text_vocab, (batch, cfg.text_len))
    text_ids[:, 0] = 0
    text_mask = np.ones((batch, cfg.text_len), bool)
    text_mask[0, -1] = False
    text_ids[0, -1] = 1
    video_ids = rng.integers(0, cfg.video_vocab, (batch, cfg.video_len))
    video_mask = np.ones((batch, cfg.video_len), bool)
    return GradcheckProblem(cfg, p, text_ids, text_mask, video_ids, video_mask,
                            rng.standard_normal((batch, k, dim)), rng.standard_normal((batch, k, dim)), weights)


def sample_coords(params: dict[str, np.ndarray], trials: int, seed: int = 0) -> dict[str, list[tuple[int, ...]]]:
    """``trials`` distinct coordinates drawn uniformly over all parameter entries."""
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    picks = np.random.default_rng(seed).choice(total, size=min(trials, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out: dict[str, list[tuple[int, ...]]] = {}
    for flat in np.sort(picks):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[i]), params[names[i]].shape)
        out.setdefault(names[i], []).append(tuple(int(j) for j in idx))
    return out


def run_gradcheck(eps: float = 1e-4, trials: int | None = None, seed: int = 0) -> FDResult:
    """Check every parameter entry, or ``trials`` random ones."""
    prob = make_problem(seed)
    coords = None if trials is None else sample_coords(prob.params, trials, seed)
    return finite_difference_check(prob.loss, prob.params, eps=eps, coords=coords)
