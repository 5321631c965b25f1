"""Retrieval evaluation: similarity over a split, ranks, R@K / MdR / MnR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .encoders import ModelConfig
from .matching import pairwise_token_similarity
from .model import encode_text, encode_video, to_tensors
from .uncertainty import mu_head, sigma_head, uncertainty_level

RECALL_KS = (1, 5, 10)
LOG_FIELDS = ("epoch", "L_DSA", "L_DUA", "L_KL", "total", "textUnc", "videoUnc",
              "R@1", "R@5", "R@10", "MdR", "MnR")


@dataclass
class RetrievalMetrics:
    recall: dict[int, float]
    median_rank: float
    mean_rank: float
    direction: str = "t2v"

    def as_fields(self) -> list[float]:
        return [self.recall[k] for k in RECALL_KS] + [self.median_rank, self.mean_rank]


@dataclass
class EvalResult:
    metrics: RetrievalMetrics
    text_uncertainty: float
    video_uncertainty: float
    ranks: np.ndarray
    query_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    gt_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def rank_of_ground_truth(scores: Sequence[float], gt_index: int) -> int:
    """1 + #strictly better + #equal scores at an earlier index."""
    s = np.asarray(scores)
    if not 0 <= gt_index < len(s):
        raise IndexError(f"ground-truth index {gt_index} outside [0, {len(s)})")
    g = s[gt_index]
    return int(1 + np.count_nonzero(s > g) + np.count_nonzero(s[:gt_index] == g))


def ranks_for_rows(sim: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rank_of_ground_truth` for each row of ``sim``."""
    sim = np.asarray(sim)
    rows = np.arange(sim.shape[0])
    g = sim[rows, gt][:, None]
    earlier = np.arange(sim.shape[1])[None, :] < gt[:, None]
    return 1 + (sim > g).sum(axis=1) + ((sim == g) & earlier).sum(axis=1)


def median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    mid = n // 2
    return float(v[mid]) if n % 2 else float((v[mid - 1] + v[mid]) / 2)


def compute_metrics(ranks: Sequence[int], direction: str = "t2v") -> RetrievalMetrics:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks to summarize")
    recall = {k: 100.0 * float(np.count_nonzero(r <= k)) / r.size for k in RECALL_KS}
    return RetrievalMetrics(recall, median(r), float(r.mean()), direction)


def t2v_ranks(sim: np.ndarray, caption_video: np.ndarray) -> np.ndarray:
    return ranks_for_rows(sim, np.asarray(caption_video))


def v2t_ranks(sim: np.ndarray, caption_video: np.ndarray) -> np.ndarray:
    """Per video: rank of its best-ranked correct caption among all captions."""
    caption_video = np.asarray(caption_video)
    cols = np.asarray(sim).T
    best = np.full(cols.shape[0], np.iinfo(np.int64).max)
    for q, v in enumerate(caption_video):
        r = rank_of_ground_truth(cols[v], q)
        best[v] = min(best[v], r)
    if (best == np.iinfo(np.int64).max).any():
        raise ValueError("every video needs at least one caption for v2t evaluation")
    return best


# --- model scoring -----------------------------------------------------------

def encode_split(params: Mapping[str, np.ndarray], cfg: ModelConfig, text_ids, text_mask, video_ids, video_mask,
                 chunk: int = 256):
    """Deterministic encodings of a whole split (no gradient tape kept)."""
    p = to_tensors(params)
    words, wmask, t_mu, t_lv = [], [], [], []
    for a in range(0, len(text_ids), chunk):
        w, m, pooled = encode_text(p, cfg, text_ids[a:a + chunk], text_mask[a:a + chunk])
        words.append(w.data)
        wmask.append(m)
        t_mu.append(mu_head(pooled, p, "text").data)
        t_lv.append(sigma_head(pooled, p, "text").data)
    frames, fmask, v_mu, v_lv = [], [], [], []
    for a in range(0, len(video_ids), chunk):
        f, m, pooled = encode_video(p, cfg, video_ids[a:a + chunk], video_mask[a:a + chunk])
        frames.append(f.data)
        fmask.append(m)
        v_mu.append(mu_head(pooled, p, "video").data)
        v_lv.append(sigma_head(pooled, p, "video").data)
    cat = np.concatenate
    return {
        "words": cat(words), "word_mask": cat(wmask), "text_mu": cat(t_mu), "text_log_var": cat(t_lv),
        "frames": cat(frames), "frame_mask": cat(fmask), "video_mu": cat(v_mu), "video_log_var": cat(v_lv),
    }


def dsa_matrix(enc: Mapping[str, np.ndarray], chunk: int = 128) -> np.ndarray:
    rows = []
    frames = Tensor(enc["frames"])
    for a in range(0, len(enc["words"]), chunk):
        s = pairwise_token_similarity(Tensor(enc["words"][a:a + chunk]), enc["word_mask"][a:a + chunk],
                                      frames, enc["frame_mask"], validate=False)
        rows.append(s.data)
    return np.concatenate(rows).astype(np.float64)


def sampled_matrix(enc: Mapping[str, np.ndarray], k: int, seed: int = 0) -> np.ndarray:
    """Mean over K x K sample pairs of the inner product (diagnostic scoring)."""
    rng = np.random.default_rng(seed)

    def mean_sample(mu, lv):
        eps = rng.standard_normal((mu.shape[0], k, mu.shape[1]))
        return (np.exp(0.5 * lv)[:, None, :] * eps + mu[:, None, :]).mean(axis=1)

    t = mean_sample(enc["text_mu"].astype(np.float64), enc["text_log_var"].astype(np.float64))
    v = mean_sample(enc["video_mu"].astype(np.float64), enc["video_log_var"].astype(np.float64))
    return t @ v.T


def evaluate(params: Mapping[str, np.ndarray], cfg: ModelConfig, corpus, split: str = "test",
             direction: Literal["t2v", "v2t"] = "t2v", mode: Literal["dsa", "fused"] = "dsa",
             k: int = 7) -> EvalResult:
    t_ids, t_mask, gt, v_ids, v_mask, _ = corpus.split_arrays(split)
    if len(t_ids) == 0 or len(v_ids) == 0:
        raise ValueError(f"split {split!r} is empty")
    enc = encode_split(params, cfg, t_ids, t_mask, v_ids, v_mask)
    sim = dsa_matrix(enc)
    if mode == "fused":
        sim = sim + sampled_matrix(enc, k)
    if direction == "t2v":
        ranks = t2v_ranks(sim, gt)
        queries, gts = np.arange(len(gt)), gt
    else:
        ranks = v2t_ranks(sim, gt)
        queries, gts = np.arange(len(v_ids)), np.arange(len(v_ids))
    return EvalResult(
        compute_metrics(ranks, direction),
        float(np.mean(uncertainty_level(enc["text_log_var"]))),
        float(np.mean(uncertainty_level(enc["video_log_var"]))),
        ranks, queries, gts,
    )


# --- text schema -------------------------------------------------------------

def _fmt(x: float | int | str) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def format_line(epoch, l_dsa: float, l_dua: float, l_kl: float, total: float, text_unc: float, video_unc: float,
                metrics: RetrievalMetrics) -> str:
    values = [epoch, l_dsa, l_dua, l_kl, total, text_unc, video_unc, *metrics.as_fields()]
    return "\t".join(_fmt(v) for v in values)


def parse_line(line: str, direction: str = "t2v") -> tuple[dict[str, float], RetrievalMetrics]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(LOG_FIELDS):
        raise ValueError(f"expected {len(LOG_FIELDS)} tab-separated fields, got {len(parts)}")
    values = {name: float(v) for name, v in zip(LOG_FIELDS, parts)}
    metrics = RetrievalMetrics({k: values[f"R@{k}"] for k in RECALL_KS}, values["MdR"], values["MnR"], direction)
    return values, metrics

