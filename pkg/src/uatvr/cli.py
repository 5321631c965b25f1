"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Results go to stdout as tab-separated lines; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from . import tensorio
from .encoders import EncodingError, EmbeddingMatrix
from .evaluator import dsa_matrix, encode_split, evaluate, format_line
from .gradcheck import GRADCHECK_TOL, make_problem, run_gradcheck
from .matching import MatchingError, match_attribution
from .synthcorpus import CorpusConfig, CorpusError, generate_corpus, read_corpus, write_corpus
from .trainer import Checkpoint, NumericalError, TrainConfig, train_run
from .validation import pack_query, parse_id_list

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("uatvr")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out(*fields) -> None:
    print("\t".join(str(f) for f in fields))


def _read_corpus(path: str):
    try:
        return read_corpus(path)
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc
    except CorpusError as exc:
        raise DataError(f"bad corpus file {path}: {exc}") from exc


def _read_ckpt(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    except (tensorio.TensorFileError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad checkpoint file {path}: {exc}") from exc


def _check_pairing(ckpt: Checkpoint, corpus) -> None:
    m, c = ckpt.model, corpus.config
    if (m.text_vocab, m.video_vocab, m.text_len, m.video_len) != (
            c.text_vocab, c.video_vocab, 1 + c.words_per_caption, c.frames_per_video):
        raise DataError("checkpoint and corpus disagree on vocabulary sizes or sequence lengths")
    if ckpt.corpus_fingerprint and ckpt.corpus_fingerprint != corpus.fingerprint():
        log.warning("checkpoint was trained on a different corpus (fingerprint mismatch)")


# --- commands ----------------------------------------------------------------

def cmd_gen_data(a) -> int:
    cfg = CorpusConfig(video_count=a.videos, captions_per_video=a.captions_per_video, frames_per_video=a.frames,
                       words_per_caption=a.words, topic_count=a.topics, topic_overlap_noise=a.noise,
                       test_fraction=a.test_fraction, seed=a.seed)
    try:
        corpus = generate_corpus(cfg)
    except (CorpusError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        write_corpus(corpus, a.out)
    except OSError as exc:
        raise DataError(f"cannot write {a.out}: {exc.strerror or exc}") from exc
    _out(a.out, len(corpus.videos), len(corpus.captions), len(corpus.video_indices("test")), corpus.fingerprint())
    return EXIT_OK


def cmd_train(a) -> int:
    corpus = _read_corpus(a.data)
    cfg = TrainConfig.desk(epochs=a.epochs, batch_size=a.batch, lr=a.lr, k=a.k, n_video_tokens=a.cv,
                           n_text_tokens=a.ct, alpha=a.alpha, beta=a.beta, dim=a.dim, seed=a.seed)
    try:
        ckpt = train_run(corpus, cfg, on_epoch=lambda e: (_out(e.line()), sys.stdout.flush()))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        ckpt.save(a.out)
    except OSError as exc:
        raise DataError(f"cannot write {a.out}: {exc.strerror or exc}") from exc
    log.info("wrote %s after %d epochs", a.out, ckpt.epochs_done)
    return EXIT_OK


def cmd_eval(a) -> int:
    corpus, ckpt = _read_corpus(a.data), _read_ckpt(a.ckpt)
    _check_pairing(ckpt, corpus)
    res = evaluate(ckpt.params, ckpt.model, corpus, "test", a.direction, a.mode, ckpt.config.k)
    nan = float("nan")
    _out(format_line(ckpt.epochs_done, nan, nan, nan, nan, res.text_uncertainty, res.video_uncertainty,
                     res.metrics))
    if a.ranks:
        with open(a.ranks, "w") as fh:
            for q, g, r in zip(res.query_ids, res.gt_ids, res.ranks):
                fh.write(f"{int(q)}\t{int(g)}\t{int(r)}\n")
    return EXIT_OK


def cmd_embed(a) -> int:
    corpus, ckpt = _read_corpus(a.data), _read_ckpt(a.ckpt)
    _check_pairing(ckpt, corpus)
    t_ids, t_mask, gt, v_ids, v_mask, vids = corpus.split_arrays("test")
    enc = encode_split(ckpt.params, ckpt.model, t_ids, t_mask, v_ids, v_mask)
    tensors = {
        "text.mu": enc["text_mu"], "text.log_var": enc["text_log_var"],
        "text.tokens": enc["words"], "text.token_mask": enc["word_mask"],
        "video.mu": enc["video_mu"], "video.log_var": enc["video_log_var"],
        "video.tokens": enc["frames"], "video.token_mask": enc["frame_mask"],
        "caption.video_row": gt, "video.index": vids,
    }
    try:
        tensorio.save(a.out, tensors)
    except OSError as exc:
        raise DataError(f"cannot write {a.out}: {exc.strerror or exc}") from exc
    for name, arr in tensors.items():
        _out(name, arr.dtype, "x".join(str(d) for d in arr.shape))
    return EXIT_OK


def cmd_query(a) -> int:
    corpus, ckpt = _read_corpus(a.data), _read_ckpt(a.ckpt)
    _check_pairing(ckpt, corpus)
    try:
        words = parse_id_list(a.tokens)
        q_ids, q_mask = pack_query(words, ckpt.model.text_len, ckpt.model.text_vocab)
    except (ValueError, EncodingError) as exc:
        raise UsageError(str(exc)) from exc
    v_ids = np.stack([v.ids for v in corpus.videos])
    v_mask = np.stack([v.mask for v in corpus.videos])
    sim = dsa_matrix(encode_split(ckpt.params, ckpt.model, q_ids, q_mask, v_ids, v_mask))[0]
    order = np.argsort(-sim, kind="stable")[:a.topk]
    for rank, v in enumerate(order, 1):
        _out(rank, int(v), corpus.video_splits[v], repr(float(sim[v])))
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    trials = None if a.trials <= 0 else a.trials
    res = run_gradcheck(a.eps, trials, a.seed)
    checked = (trials if trials is not None else make_problem(a.seed).size) - len(res.kinks)
    worst = f"{res.worst[0]}{list(res.worst[1])}" if res.worst else "-"
    _out("maxRelErr", repr(res.max_rel_error), "worst", worst, "kinks", len(res.kinks), "checked", checked)
    if not res.max_rel_error <= GRADCHECK_TOL:
        log.error("gradient check failed: max relative error %.3g > %.0e", res.max_rel_error, GRADCHECK_TOL)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_explain(a) -> int:
    corpus, ckpt = _read_corpus(a.data), _read_ckpt(a.ckpt)
    _check_pairing(ckpt, corpus)
    try:
        i, j = parse_id_list(a.pair)
    except ValueError as exc:
        raise UsageError(f"--pair expects CAPTION,VIDEO: {exc}") from exc
    if not (0 <= i < len(corpus.captions) and 0 <= j < len(corpus.videos)):
        raise UsageError(f"pair ({i},{j}) out of range: {len(corpus.captions)} captions, {len(corpus.videos)} videos")
    cap, vid = corpus.captions[i].seq, corpus.videos[j]
    enc = encode_split(ckpt.params, ckpt.model, cap.ids[None], cap.mask[None], vid.ids[None], vid.mask[None])
    try:
        att = match_attribution(EmbeddingMatrix(enc["words"][0].astype(np.float64), enc["word_mask"][0]),
                                EmbeddingMatrix(enc["frames"][0].astype(np.float64), enc["frame_mask"][0]))
    except MatchingError as exc:
        raise DataError(str(exc)) from exc
    n_t, n_v = ckpt.model.n_text_tokens, ckpt.model.n_video_tokens
    _out("score", repr(float(dsa_matrix(enc)[0, 0])))
    for m, w in enumerate(att.frame_weights):
        _out("frame", m, "extra" if m < n_v else "frame", repr(float(w)))
    for n, w in enumerate(att.word_weights):
        _out("word", n, "extra" if n < n_t else "word", repr(float(w)))
    for n, m, s in att.matched_pairs:
        _out("pair", n, m, repr(s))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    desk = TrainConfig.desk()
    corpus = CorpusConfig()
    p = _Parser(prog="uatvr", description="Uncertainty-adaptive text-video retrieval on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug diagnostics on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=corpus.video_count)
    g.add_argument("--captions-per-video", type=int, default=corpus.captions_per_video)
    g.add_argument("--frames", type=int, default=corpus.frames_per_video)
    g.add_argument("--words", type=int, default=corpus.words_per_caption)
    g.add_argument("--topics", type=int, default=corpus.topic_count)
    g.add_argument("--noise", type=float, default=corpus.topic_overlap_noise)
    g.add_argument("--test-fraction", type=float, default=corpus.test_fraction)
    g.add_argument("--seed", type=int, default=corpus.seed)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=desk.epochs)
    t.add_argument("--batch", type=int, default=desk.batch_size)
    t.add_argument("--lr", type=float, default=desk.lr)
    t.add_argument("--k", type=int, default=desk.k)
    t.add_argument("--cv", type=int, default=desk.n_video_tokens)
    t.add_argument("--ct", type=int, default=desk.n_text_tokens)
    t.add_argument("--alpha", type=float, default=desk.alpha)
    t.add_argument("--beta", type=float, default=desk.beta)
    t.add_argument("--dim", type=int, default=desk.dim)
    t.add_argument("--seed", type=int, default=desk.seed)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--direction", choices=("t2v", "v2t"), default="t2v")
    e.add_argument("--mode", choices=("dsa", "fused"), default="dsa")
    e.add_argument("--ranks", default=None, help="write per-query (query, gt, rank) lines here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="export test-split embeddings and Gaussian parameters")
    m.add_argument("--data", required=True)
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_embed)

    q = sub.add_parser("query", help="rank all corpus videos for a token-id query")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--tokens", required=True, help="comma-separated word ids")
    q.add_argument("--topk", type=int, default=10)
    q.set_defaults(func=cmd_query)

    c = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--trials", type=int, default=100, help="random coordinates to check; 0 checks all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("explain", help="per-token attribution for one caption/video pair")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--pair", required=True, help="CAPTION,VIDEO corpus indices")
    x.set_defaults(func=cmd_explain)
    return p


def _thread_limit():
    raw = os.environ.get("UATVR_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"UATVR_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
