"""Token-sequence encoders and the lightweight sequential transformer.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names so
the optimizer and the checkpoint writer can treat them uniformly. Forward
functions take the same mapping with :class:`~uatvr.autodiff.Tensor` values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CLS_ID = 0
PAD_ID = 1

BLOCK_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray
    kind: Literal["text", "video"] = "text"

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "mask", mask)
        if ids.ndim != 1 or ids.shape != mask.shape:
            raise EncodingError(f"ids/mask length mismatch: {ids.shape} vs {mask.shape}")
        if not mask.any():
            raise EncodingError("sequence has no real tokens")
        if self.kind == "text" and (ids[0] != CLS_ID or not mask[0]):
            raise EncodingError("text sequences must start with an unmasked [CLS] (id 0)")

    def __len__(self):
        return len(self.ids)


@dataclass
class EmbeddingMatrix:
    """Per-token embeddings of one sequence: ``rows`` is L x D, ``mask`` length L."""

    rows: np.ndarray | Tensor
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.rows.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def data(self) -> np.ndarray:
        return self.rows.data if isinstance(self.rows, Tensor) else np.asarray(self.rows)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 4
    text_vocab: int = 130
    video_vocab: int = 128
    text_len: int = 17
    video_len: int = 12
    backbone_layers: int = 1
    seq_layers: int = 2
    n_text_tokens: int = 2
    n_video_tokens: int = 3
    include_cls: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        if self.n_text_tokens < 0 or self.n_video_tokens < 0:
            raise ValueError("extra token counts must be >= 0")


def _init_block(rng: np.random.Generator, prefix: str, d: int, std: float, dtype) -> dict[str, np.ndarray]:
    p = {
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "wq": rng.normal(0, std, (d, d)), "wk": rng.normal(0, std, (d, d)),
        "wv": rng.normal(0, std, (d, d)), "wo": rng.normal(0, std, (d, d)),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
        "w1": rng.normal(0, std, (d, 4 * d)), "b1": np.zeros(4 * d),
        "w2": rng.normal(0, std, (4 * d, d)), "b2": np.zeros(d),
    }
    return {f"{prefix}.{k}": np.asarray(p[k], dtype=dtype) for k in BLOCK_KEYS}


def init_tower(cfg: ModelConfig, modality: str, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Backbone + extra tokens + seqTransf parameters for one modality."""
    d, std = cfg.dim, cfg.init_std
    vocab, length, n_extra = (
        (cfg.text_vocab, cfg.text_len, cfg.n_text_tokens) if modality == "text"
        else (cfg.video_vocab, cfg.video_len, cfg.n_video_tokens))
    p = {
        f"{modality}.token": rng.normal(0, std, (vocab, d)).astype(dtype),
        f"{modality}.pos": rng.normal(0, std, (length, d)).astype(dtype),
    }
    for i in range(cfg.backbone_layers):
        p.update(_init_block(rng, f"{modality}.backbone.{i}", d, std, dtype))
    p[f"{modality}.extra"] = rng.normal(0, std, (n_extra, d)).astype(dtype)
    p[f"{modality}.extra_pos"] = rng.normal(0, std, (n_extra, d)).astype(dtype)
    for i in range(cfg.seq_layers):
        p.update(_init_block(rng, f"{modality}.seq.{i}", d, std, dtype))
    return p


def transformer_block(x: Tensor, mask: np.ndarray, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Pre-LN residual block; all-zero weights make it the identity."""
    b, length, d = x.shape
    dh = d // heads
    key_mask = mask[:, None, None, :]

    def split(t):
        return ad.transpose(ad.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    h = ad.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    q, k, v = (split(ad.matmul(h, p[f"{prefix}.{w}"])) for w in ("wq", "wk", "wv"))
    att = ad.attention(q, k, v, key_mask)
    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, length, d))
    x = ad.add(x, ad.matmul(att, p[f"{prefix}.wo"]))

    h = ad.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    h = ad.gelu(ad.add(ad.matmul(h, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    h = ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])
    return ad.add(x, h)


def _layer_count(p: Mapping[str, object], prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.wq" in p:
        n += 1
    return n


def _check_ids(ids: np.ndarray, mask: np.ndarray, vocab: int, max_len: int, modality: str) -> None:
    if ids.shape[-1] > max_len:
        raise EncodingError(f"{modality} sequence length {ids.shape[-1]} exceeds maxLen {max_len}")
    real = ids[mask]
    if real.size and (real.min() < 0 or real.max() >= vocab):
        raise EncodingError(f"{modality} token id out of vocabulary [0, {vocab})")


def encode_batch(p: Mapping[str, Tensor], modality: str, ids: np.ndarray, mask: np.ndarray, heads: int) -> Tensor:
    """Backbone encoding of a padded batch: ``ids``/``mask`` are B x L.

    Masked positions are zeroed before and after the transformer, so their ids
    never influence any output.
    """
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    table, pos = p[f"{modality}.token"], p[f"{modality}.pos"]
    _check_ids(ids, mask, table.shape[0], pos.shape[0], modality)
    safe_ids = np.where(mask, ids, 0)
    x = ad.add(ad.take(table, safe_ids), ad.slice_axis(pos, 0, ids.shape[1]))
    keep = mask[..., None]
    x = ad.where_rows(x, keep)
    prefix = f"{modality}.backbone"
    for i in range(_layer_count(p, prefix)):
        x = transformer_block(x, mask, p, f"{prefix}.{i}", heads)
    return ad.where_rows(x, keep)


def append_extra_tokens(x: Tensor, mask: np.ndarray, extra: Tensor, extra_pos: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Prepend C learnable tokens (plus their dedicated position rows) to a B x L x D batch."""
    n_extra = extra.shape[0]
    if n_extra == 0:
        return x, mask
    if extra.shape[-1] != x.shape[-1]:
        raise ad.ShapeError("append_extra_tokens", x.shape[-1], extra.shape[-1])
    tokens = extra if extra_pos is None else ad.add(extra, extra_pos)
    b = x.shape[0]
    tokens = ad.add(ad.reshape(tokens, (1, n_extra, x.shape[-1])), Tensor(np.zeros((b, 1, 1), dtype=x.dtype)))
    new_mask = np.concatenate([np.ones((b, n_extra), dtype=bool), mask], axis=1)
    return ad.concat([tokens, x], axis=1), new_mask


def seq_transf(x: Tensor, mask: np.ndarray, p: Mapping[str, Tensor], modality: str, heads: int) -> Tensor:
    prefix = f"{modality}.seq"
    for i in range(_layer_count(p, prefix)):
        x = transformer_block(x, mask, p, f"{prefix}.{i}", heads)
    return ad.where_rows(x, mask[..., None])


def normalize_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    out = ad.l2_normalize(x)
    if mask is not None:
        out = ad.where_rows(out, np.asarray(mask, dtype=bool)[..., None])
    return out


# --- single-sequence conveniences --------------------------------------------

def _as_tensors(params: Mapping[str, np.ndarray | Tensor]) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def encode_sequence(seq: TokenSequence, params: Mapping[str, np.ndarray | Tensor], heads: int = 4) -> EmbeddingMatrix:
    p = _as_tensors(params)
    out = encode_batch(p, seq.kind, seq.ids[None, :], seq.mask[None, :], heads)
    return EmbeddingMatrix(ad.reshape(out, out.shape[1:]), seq.mask.copy())


def append_extra_tokens_single(x: EmbeddingMatrix, extra: np.ndarray | Tensor,
                               extra_pos: np.ndarray | Tensor | None = None) -> EmbeddingMatrix:
    rows = x.rows if isinstance(x.rows, Tensor) else Tensor(x.rows)
    extra = extra if isinstance(extra, Tensor) else Tensor(np.asarray(extra, dtype=rows.dtype))
    if extra_pos is not None and not isinstance(extra_pos, Tensor):
        extra_pos = Tensor(np.asarray(extra_pos, dtype=rows.dtype))
    out, mask = append_extra_tokens(ad.reshape(rows, (1,) + rows.shape), x.mask[None, :], extra, extra_pos)
    return EmbeddingMatrix(ad.reshape(out, out.shape[1:]), mask[0])


def seq_transf_single(x: EmbeddingMatrix, params: Mapping[str, np.ndarray | Tensor], modality: str,
                      heads: int = 4) -> EmbeddingMatrix:
    rows = x.rows if isinstance(x.rows, Tensor) else Tensor(x.rows)
    out = seq_transf(ad.reshape(rows, (1,) + rows.shape), x.mask[None, :], _as_tensors(params), modality, heads)
    return EmbeddingMatrix(ad.reshape(out, out.shape[1:]), x.mask.copy())


def normalize_rows_single(x: EmbeddingMatrix) -> EmbeddingMatrix:
    rows = x.rows if isinstance(x.rows, Tensor) else Tensor(np.asarray(x.rows, dtype=float))
    return EmbeddingMatrix(normalize_rows(rows, x.mask), x.mask.copy())
