"""Synthetic one-to-many caption/video corpora and the ``UATC`` file format.

Each latent topic owns ``tokens_per_topic`` video tokens and the same number of
text tokens; text token ``k`` of topic ``t`` describes video token ``k`` of
topic ``t``. A video is ``segments`` contiguous runs of frames, each run drawn
from a small entity subset of one topic. Captions come in three granularities:

* global  - a few entity words from every segment, in segment order
* segment - words from one segment's entities
* entity  - a 2-3 word fragment of one segment's entities

File layout (all integers little-endian)::

    magic     4s   b"UATC"
    version   u32  1
    config    u32 x 9, f64 test_fraction, f64 noise, u64 seed
              (CorpusConfig field order)
    n_videos  u32
      per video:   u8 split, u32 length, u32 ids[length], u8 mask[length]
    n_captions u32
      per caption: u32 video_index, u8 granularity, u8 split,
                   u32 length, u32 ids[length], u8 mask[length]
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoders import CLS_ID, PAD_ID, TokenSequence

MAGIC = b"UATC"
VERSION = 1
TEXT_RESERVED = 2  # [CLS] and [PAD]
GRANULARITIES = ("global", "segment", "entity")
SPLITS = ("train", "test")

_CONFIG_FMT = "<9IddQ"


class CorpusError(ValueError):
    pass


class CorpusFormatError(CorpusError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    video_count: int = 250
    captions_per_video: int = 5
    frames_per_video: int = 12
    words_per_caption: int = 16
    topic_count: int = 16
    segments_per_video: int = 3
    tokens_per_topic: int = 8
    entities_per_segment: int = 3
    text_vocab: int = 0   # 0 -> minimal size
    test_fraction: float = 0.2
    topic_overlap_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.text_vocab == 0:
            object.__setattr__(self, "text_vocab", TEXT_RESERVED + self.topic_count * self.tokens_per_topic)

    @property
    def test_videos(self) -> int:
        return int(round(self.video_count * self.test_fraction))

    @property
    def video_vocab(self) -> int:
        return self.topic_count * self.tokens_per_topic

    def validate(self) -> None:
        checks = [
            (self.video_count >= 1, "video_count >= 1"),
            (self.captions_per_video >= 1, "captions_per_video >= 1"),
            (1 <= self.segments_per_video <= self.frames_per_video, "1 <= segments_per_video <= frames_per_video"),
            (self.segments_per_video <= self.topic_count, "segments_per_video <= topic_count"),
            (2 <= self.entities_per_segment <= self.tokens_per_topic, "2 <= entities_per_segment <= tokens_per_topic"),
            (self.words_per_caption >= 3, "words_per_caption >= 3"),
            (0.0 <= self.test_fraction < 1.0, "test_fraction in [0, 1)"),
            (self.test_videos < self.video_count, "at least one training video"),
            (0.0 <= self.topic_overlap_noise <= 1.0, "topic_overlap_noise in [0, 1]"),
            (self.text_vocab >= TEXT_RESERVED + self.topic_count * self.tokens_per_topic,
             "text_vocab >= 2 + topic_count * tokens_per_topic"),
        ]
        for ok, bound in checks:
            if not ok:
                raise CorpusError(f"infeasible corpus config: violates {bound}")


@dataclass
class Caption:
    seq: TokenSequence
    video_index: int
    granularity: str
    split: str


@dataclass
class Corpus:
    config: CorpusConfig
    videos: list[TokenSequence]
    video_splits: list[str]
    captions: list[Caption] = field(default_factory=list)

    def video_indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.video_splits) if s == split]

    def caption_indices(self, split: str) -> list[int]:
        return [i for i, c in enumerate(self.captions) if c.split == split]

    def split_arrays(self, split: str):
        """Padded arrays for one split.

        Returns ``(text_ids, text_mask, caption_video_rows, video_ids, video_mask, video_index)``
        where ``caption_video_rows[q]`` is the row of caption q's video in the
        split's video arrays.
        """
        vids = self.video_indices(split)
        row_of = {v: r for r, v in enumerate(vids)}
        caps = [self.captions[i] for i in self.caption_indices(split)]
        t_ids = np.stack([c.seq.ids for c in caps]) if caps else np.zeros((0, 0), np.int64)
        t_mask = np.stack([c.seq.mask for c in caps]) if caps else np.zeros((0, 0), bool)
        gt = np.array([row_of[c.video_index] for c in caps], dtype=np.int64)
        v_ids = np.stack([self.videos[v].ids for v in vids])
        v_mask = np.stack([self.videos[v].mask for v in vids])
        return t_ids, t_mask, gt, v_ids, v_mask, np.array(vids, dtype=np.int64)

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self)).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Corpus) and dumps(self) == dumps(other)


# --- generation --------------------------------------------------------------

def _text_token(cfg: CorpusConfig, topic: int, k: int) -> int:
    return TEXT_RESERVED + topic * cfg.tokens_per_topic + k


def _video_token(cfg: CorpusConfig, topic: int, k: int) -> int:
    return topic * cfg.tokens_per_topic + k


def _segment_bounds(m: int, s: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, m, s + 1).round().astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(s)]


def _caption_words(cfg: CorpusConfig, rng: np.random.Generator, topics, entities, kind: str) -> list[int]:
    n_max = cfg.words_per_caption
    if kind == "global":
        words = []
        for t, ents in zip(topics, entities):
            pick = rng.choice(ents, size=min(len(ents), int(rng.integers(2, 4))), replace=False)
            words.extend(_text_token(cfg, t, int(k)) for k in pick)
    else:
        seg = int(rng.integers(len(topics)))
        t, ents = topics[seg], entities[seg]
        if kind == "segment":
            n = int(rng.integers(4, 7))
            words = [_text_token(cfg, t, int(k)) for k in rng.choice(ents, size=n, replace=True)]
        else:
            n = min(len(ents), int(rng.integers(2, 4)))
            words = [_text_token(cfg, t, int(k)) for k in rng.choice(ents, size=n, replace=False)]
    words = words[:n_max]
    all_topic_words = cfg.topic_count * cfg.tokens_per_topic
    for i in range(len(words)):
        if rng.random() < cfg.topic_overlap_noise:
            words[i] = TEXT_RESERVED + int(rng.integers(all_topic_words))
    return words


def _pack_caption(cfg: CorpusConfig, words: list[int]) -> TokenSequence:
    length = 1 + cfg.words_per_caption
    ids = np.full(length, PAD_ID, dtype=np.int64)
    mask = np.zeros(length, dtype=bool)
    ids[0] = CLS_ID
    mask[0] = True
    ids[1:1 + len(words)] = words
    mask[1:1 + len(words)] = True
    return TokenSequence(ids, mask, "text")


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic corpus; the last ``test_videos`` videos form the test split."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_train = cfg.video_count - cfg.test_videos
    bounds = _segment_bounds(cfg.frames_per_video, cfg.segments_per_video)
    videos, splits, captions = [], [], []
    seen = {"train": set(), "test": set()}

    for v in range(cfg.video_count):
        split = "train" if v < n_train else "test"
        other = "test" if split == "train" else "train"
        for _ in range(1000):
            topics = rng.choice(cfg.topic_count, size=cfg.segments_per_video, replace=False)
            entities = [rng.choice(cfg.tokens_per_topic, size=cfg.entities_per_segment, replace=False)
                        for _ in topics]
            ids = np.empty(cfg.frames_per_video, dtype=np.int64)
            for (a, b), t, ents in zip(bounds, topics, entities):
                ids[a:b] = [_video_token(cfg, int(t), int(k)) for k in rng.choice(ents, size=b - a)]
            if ids.tobytes() not in seen[other]:
                break
        else:
            raise CorpusError("could not draw a video distinct from the other split")
        seen[split].add(ids.tobytes())
        videos.append(TokenSequence(ids, np.ones_like(ids, dtype=bool), "video"))
        splits.append(split)

        for _ in range(cfg.captions_per_video):
            kind = GRANULARITIES[int(rng.integers(3))]
            for _ in range(1000):
                seq = _pack_caption(cfg, _caption_words(cfg, rng, topics, entities, kind))
                if seq.ids.tobytes() not in seen[other]:
                    break
            else:
                raise CorpusError("could not draw a caption distinct from the other split")
            seen[split].add(seq.ids.tobytes())
            captions.append(Caption(seq, v, kind, split))
    return Corpus(cfg, videos, splits, captions)


# --- serialization -----------------------------------------------------------

def _write_seq(buf: io.BytesIO, seq: TokenSequence) -> None:
    buf.write(struct.pack("<I", len(seq.ids)))
    buf.write(seq.ids.astype("<u4").tobytes())
    buf.write(seq.mask.astype(np.uint8).tobytes())


def dumps(c: Corpus) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack(_CONFIG_FMT, *astuple(c.config)))
    buf.write(struct.pack("<I", len(c.videos)))
    for seq, split in zip(c.videos, c.video_splits):
        buf.write(struct.pack("<B", SPLITS.index(split)))
        _write_seq(buf, seq)
    buf.write(struct.pack("<I", len(c.captions)))
    for cap in c.captions:
        buf.write(struct.pack("<IBB", cap.video_index, GRANULARITIES.index(cap.granularity), SPLITS.index(cap.split)))
        _write_seq(buf, cap.seq)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorpusFormatError(f"truncated corpus file at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def seq(self, kind: str) -> TokenSequence:
        (n,) = self.unpack("<I")
        ids = np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)
        mask = np.frombuffer(self.take(n), dtype=np.uint8).astype(bool)
        try:
            return TokenSequence(ids, mask, kind)
        except ValueError as e:
            raise CorpusFormatError(f"invalid {kind} sequence: {e}") from None


def loads(data: bytes) -> Corpus:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CorpusFormatError(f"unsupported corpus format version {version} (this reader handles {VERSION})")
    names = [f.name for f in fields(CorpusConfig)]
    cfg = CorpusConfig(**dict(zip(names, r.unpack(_CONFIG_FMT))))
    (n_videos,) = r.unpack("<I")
    videos, splits = [], []
    for _ in range(n_videos):
        (split,) = r.unpack("<B")
        if split >= len(SPLITS):
            raise CorpusFormatError(f"bad split code {split}")
        splits.append(SPLITS[split])
        videos.append(r.seq("video"))
    (n_caps,) = r.unpack("<I")
    captions = []
    for _ in range(n_caps):
        vi, g, s = r.unpack("<IBB")
        if vi >= n_videos or g >= len(GRANULARITIES) or s >= len(SPLITS):
            raise CorpusFormatError(f"bad caption header (video={vi}, granularity={g}, split={s})")
        captions.append(Caption(r.seq("text"), vi, GRANULARITIES[g], SPLITS[s]))
    if r.pos != len(data):
        raise CorpusFormatError(f"{len(data) - r.pos} trailing bytes after corpus payload")
    return Corpus(cfg, videos, splits, captions)


def write_corpus(c: Corpus, path: str | Path) -> None:
    Path(path).write_bytes(dumps(c))


def read_corpus(path: str | Path) -> Corpus:
    return loads(Path(path).read_bytes())
