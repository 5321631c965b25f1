"""Optimization loop: Adam with linear warmup + cosine decay, per-epoch logging,
and ``UATV`` checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensorio
from .autodiff import Tensor
from .encoders import ModelConfig
from .evaluator import RetrievalMetrics, evaluate, format_line
from .model import LOG_INV_TEMP, forward_batch, init_params
from .objectives import LossWeights, logit_scale, total_loss
from .uncertainty import noise

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 5e-5
    warmup_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1e-2
    beta: float = 1e-4
    k: int = 7
    n_video_tokens: int = 3
    n_text_tokens: int = 2
    dim: int = 32
    heads: int = 4
    backbone_layers: int = 1
    seq_layers: int = 2
    init_scale: float = 100.0
    init_log_var: float | None = None  # None: -ln(dim), so initial noise norm ~ |mu| = 1
    grad_clip: float = 1.0
    include_cls: bool = False
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale reference experiment (single CPU core, minutes)."""
        base = dict(batch_size=32, lr=DESK_LR)
        base.update(overrides)
        return cls(**base)

    @property
    def start_log_var(self) -> float:
        return -math.log(self.dim) if self.init_log_var is None else float(self.init_log_var)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def model_config(self, text_vocab: int, video_vocab: int, text_len: int, video_len: int) -> ModelConfig:
        return ModelConfig(dim=self.dim, heads=self.heads, text_vocab=text_vocab, video_vocab=video_vocab,
                           text_len=text_len, video_len=video_len, backbone_layers=self.backbone_layers,
                           seq_layers=self.seq_layers, n_text_tokens=self.n_text_tokens,
                           n_video_tokens=self.n_video_tokens, include_cls=self.include_cls)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


DESK_LR = 5e-4


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class EpochLog:
    epoch: int
    dsa: float
    dua: float
    kl: float
    total: float
    text_uncertainty: float
    video_uncertainty: float
    metrics: RetrievalMetrics

    def line(self) -> str:
        return format_line(self.epoch, self.dsa, self.dua, self.kl, self.total,
                           self.text_uncertainty, self.video_uncertainty, self.metrics)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    config: TrainConfig
    model: ModelConfig
    corpus_fingerprint: str = ""
    epochs_done: int = 0
    logs: list[EpochLog] = field(default_factory=list)

    def to_tensors(self) -> dict[str, np.ndarray]:
        meta = {
            "version": CHECKPOINT_VERSION,
            "train_config": asdict(self.config),
            "model_config": asdict(self.model),
            "corpus_fingerprint": self.corpus_fingerprint,
            "epochs_done": self.epochs_done,
        }
        out = {tensorio.META_KEY: tensorio.encode_meta(meta), "adam.step": np.asarray(self.adam.step, np.int64)}
        for name in self.params:
            out[f"param.{name}"] = self.params[name]
        for name in self.params:
            out[f"adam.m.{name}"] = self.adam.m[name]
            out[f"adam.v.{name}"] = self.adam.v[name]
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "Checkpoint":
        meta = tensorio.decode_meta(t[tensorio.META_KEY])
        if meta.get("version") != CHECKPOINT_VERSION:
            raise tensorio.TensorFileError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param."):]: v for k, v in t.items() if k.startswith("param.")}
        adam = AdamState({k: t[f"adam.m.{k}"] for k in params}, {k: t[f"adam.v.{k}"] for k in params},
                         int(t["adam.step"]))
        return cls(params, adam, TrainConfig.from_dict(meta["train_config"]), ModelConfig(**meta["model_config"]),
                   meta["corpus_fingerprint"], meta["epochs_done"])

    def save(self, path: str | Path) -> None:
        tensorio.save(path, self.to_tensors())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_tensors(tensorio.load(path))


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear ramp 0 -> base_lr over the warmup steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p -= update


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype, copy=False)
    return total


def plan_batches(video_of: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffle captions and pack them into batches whose videos are all distinct."""
    order = list(np.random.default_rng([seed, epoch, 7]).permutation(len(video_of)))
    batches = []
    while order:
        batch, used, rest = [], set(), []
        for q in order:
            if len(batch) < batch_size and video_of[q] not in used:
                batch.append(q)
                used.add(video_of[q])
            else:
                rest.append(q)
        order = rest
        if len(batch) >= 2:
            batches.append(np.array(batch, dtype=np.int64))
    return batches


def model_config_for(cfg: TrainConfig, corpus) -> ModelConfig:
    cc = corpus.config
    return cfg.model_config(cc.text_vocab, cc.video_vocab, 1 + cc.words_per_caption, cc.frames_per_video)


def init_checkpoint(cfg: TrainConfig, corpus) -> Checkpoint:
    mcfg = model_config_for(cfg, corpus)
    params = init_params(mcfg, cfg.seed, np.float32, cfg.init_scale, cfg.start_log_var)
    return Checkpoint(params, AdamState.zeros_like(params), cfg, mcfg, corpus.fingerprint())


def batch_noise(cfg: TrainConfig, epoch: int, batch: int, size: int, stream: int, dtype) -> np.ndarray:
    return np.stack([noise(cfg.seed, epoch, batch, i, stream, cfg.k, cfg.dim, dtype) for i in range(size)])


def train_step(ckpt: Checkpoint, text_ids, text_mask, video_ids, video_mask, lr: float,
               text_eps=None, video_eps=None) -> dict[str, float]:
    cfg = ckpt.config
    p = {k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
    bundle = forward_batch(p, ckpt.model, text_ids, text_mask, video_ids, video_mask, text_eps, video_eps)
    loss, breakdown = total_loss(bundle, cfg.weights, logit_scale(p[LOG_INV_TEMP]))
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
    breakdown["grad_norm"] = clip_global_norm(grads, cfg.grad_clip)
    adam_step(ckpt.params, grads, ckpt.adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return breakdown


def train_run(corpus, cfg: TrainConfig, on_epoch: Callable[[EpochLog], None] | None = None,
              eval_split: str = "test") -> Checkpoint:
    """Train from a fresh initialization; returns the final checkpoint with its logs."""
    ckpt = init_checkpoint(cfg, corpus)
    t_ids, t_mask, gt, v_ids, v_mask, _ = corpus.split_arrays("train")
    if len(t_ids) == 0:
        raise ValueError("training split is empty")
    if cfg.batch_size > len(v_ids):
        raise ValueError(f"batch size {cfg.batch_size} exceeds {len(v_ids)} training videos")
    plans = [plan_batches(gt, cfg.batch_size, cfg.seed, e) for e in range(cfg.epochs)]
    total_steps = sum(len(p) for p in plans)
    dtype = ckpt.params[LOG_INV_TEMP].dtype
    sample = cfg.k > 0 and (cfg.alpha > 0 or cfg.beta > 0)

    for epoch, plan in enumerate(plans):
        sums = {"dsa": 0.0, "dua": 0.0, "kl": 0.0, "total": 0.0}
        for b, caps in enumerate(plan):
            vids = gt[caps]
            t_eps = batch_noise(cfg, epoch, b, len(caps), 0, dtype) if sample else None
            v_eps = batch_noise(cfg, epoch, b, len(caps), 1, dtype) if sample else None
            lr = lr_schedule(ckpt.adam.step + 1, total_steps + 1, cfg.lr, cfg.warmup_fraction)
            out = train_step(ckpt, t_ids[caps], t_mask[caps], v_ids[vids], v_mask[vids], lr, t_eps, v_eps)
            for k in sums:
                sums[k] += out[k] if not math.isnan(out[k]) else 0.0
        n = max(len(plan), 1)
        ev = evaluate(ckpt.params, ckpt.model, corpus, eval_split, "t2v")
        log = EpochLog(epoch + 1, sums["dsa"] / n, sums["dua"] / n if sample else float("nan"), sums["kl"] / n,
                       sums["total"] / n, ev.text_uncertainty, ev.video_uncertainty, ev.metrics)
        ckpt.logs.append(log)
        ckpt.epochs_done = epoch + 1
        logger.debug("%s", log.line())
        if on_epoch is not None:
            on_epoch(log)
    return ckpt


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
