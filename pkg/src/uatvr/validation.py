"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .encoders import CLS_ID, PAD_ID, EncodingError


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite number >= 0, got {value}")
    return value


def check_fraction(value, name: str, open_right: bool = True) -> float:
    value = float(value)
    hi_ok = value < 1 if open_right else value <= 1
    if not (0 <= value and hi_ok):
        raise ValueError(f"{name} must lie in [0, 1{')' if open_right else ']'}, got {value}")
    return value


def check_token_batch(ids, mask=None, vocab: int | None = None, length: int | None = None,
                      kind: str = "text") -> tuple[np.ndarray, np.ndarray]:
    """Coerce a batch of id rows (and optional mask) to int64 / bool 2-D arrays.

    Without a mask, ``PAD_ID`` marks padding for text and everything is real for
    video. Raises :class:`EncodingError` on out-of-vocabulary ids, a wrong
    length, rows without real tokens, or text rows not starting with [CLS].
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise EncodingError(f"expected a 2-D batch of ids, got shape {ids.shape}")
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise EncodingError(f"token ids must be integers, got dtype {ids.dtype}")
    ids = ids.astype(np.int64)
    if mask is None:
        mask = ids != PAD_ID if kind == "text" else np.ones(ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != ids.shape:
        raise EncodingError(f"mask shape {mask.shape} does not match ids {ids.shape}")
    if length is not None and ids.shape[1] != length:
        raise EncodingError(f"expected sequences of length {length}, got {ids.shape[1]}")
    if vocab is not None and ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise EncodingError(f"token id outside [0, {vocab}): min {ids.min()}, max {ids.max()}")
    if not mask.any(axis=1).all():
        raise EncodingError("every sequence needs at least one real token")
    if kind == "text" and ids.shape[0] and not ((ids[:, 0] == CLS_ID) & mask[:, 0]).all():
        raise EncodingError(f"text sequences must start with an unmasked [CLS] (id {CLS_ID})")
    return ids, mask


def pack_query(words: Sequence[int], length: int, vocab: int) -> tuple[np.ndarray, np.ndarray]:
    """Build one padded text row ([CLS] + words) from raw word ids."""
    words = [int(w) for w in words]
    if words and words[0] == CLS_ID:
        words = words[1:]
    if not words:
        raise EncodingError("query has no word tokens")
    if len(words) > length - 1:
        raise EncodingError(f"query has {len(words)} words, at most {length - 1} fit")
    bad = [w for w in words if not 2 <= w < vocab]
    if bad:
        raise EncodingError(f"word ids must lie in [2, {vocab}), got {bad}")
    ids = np.full((1, length), PAD_ID, dtype=np.int64)
    mask = np.zeros((1, length), dtype=bool)
    ids[0, 0] = CLS_ID
    ids[0, 1:1 + len(words)] = words
    mask[0, :1 + len(words)] = True
    return ids, mask


def parse_id_list(text: str) -> list[int]:
    """``"3,17,4"`` -> [3, 17, 4]."""
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc
