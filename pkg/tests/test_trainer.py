import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from uatvr import tensorio
from uatvr.synthcorpus import CorpusConfig, generate_corpus
from uatvr.trainer import (
    DESK_LR,
    AdamState,
    Checkpoint,
    NumericalError,
    TrainConfig,
    adam_step,
    clip_global_norm,
    init_checkpoint,
    lr_schedule,
    plan_batches,
    train_run,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusConfig(video_count=20, seed=1))


def tiny(**kw):
    base = dict(epochs=2, batch_size=8, dim=16, heads=2, k=3, seed=0)
    base.update(kw)
    return TrainConfig.desk(**base)


def ckpt_bytes(ck):
    return tensorio.dumps(ck.to_tensors())


class TestConfig:
    def test_reference_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.lr, c.k, c.n_video_tokens, c.n_text_tokens) == (5, 64, 5e-5, 7, 3, 2)
        assert (c.alpha, c.beta, c.warmup_fraction, c.grad_clip) == (1e-2, 1e-4, 0.1, 1.0)

    def test_desk_preset(self):
        c = TrainConfig.desk()
        assert c.batch_size == 32 and c.lr == DESK_LR and c.dim == 32

    def test_start_log_var(self):
        assert_allclose(TrainConfig(dim=32).start_log_var, -math.log(32))
        assert TrainConfig(init_log_var=0.0).start_log_var == 0.0


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 100, 5e-5) == 0.0
        assert lr_schedule(10, 100, 5e-5) == 5e-5
        assert_allclose(lr_schedule(100, 100, 5e-5), 0.0, atol=1e-20)

    def test_warmup_linear(self):
        assert_allclose(lr_schedule(5, 100, 1.0), 0.5)

    def test_cosine_midpoint(self):
        assert_allclose(lr_schedule(55, 100, 1.0), 0.5, rtol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(101, 100, 1.0)
        with pytest.raises(ValueError):
            lr_schedule(-1, 100, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 500), st.data())
    def test_bounded_and_peaks_at_warmup_end(self, total, data):
        step = data.draw(st.integers(0, total))
        lr = lr_schedule(step, total, 1.0)
        assert 0.0 <= lr <= 1.0
        warm = 0.1 * total
        if step < warm:
            assert lr <= lr_schedule(min(total, math.ceil(warm)), total, 1.0) + 1e-15


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"w": np.array([0.5])}
        state = AdamState.zeros_like(params)
        adam_step(params, {"w": np.array([1.0])}, state, 1e-3)
        assert_allclose(params["w"] - 0.5, [-1e-3], rtol=1e-6)
        assert state.step == 1

    def test_zero_gradient(self):
        params = {"w": np.array([0.5, -1.0])}
        state = AdamState({"w": np.array([0.2, 0.1])}, {"w": np.array([0.0, 0.0])}, 3)
        before = params["w"].copy()
        adam_step(params, {"w": np.zeros(2)}, state, 1e-3)
        assert_allclose(state.m["w"], [0.18, 0.09])
        # m is nonzero so the update is not exactly zero; with zero moments it is
        params2 = {"w": before.copy()}
        adam_step(params2, {"w": np.zeros(2)}, AdamState.zeros_like(params2), 1e-3)
        assert_array_equal(params2["w"], before)

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(4)]
        params = {"w": p0.copy()}
        state = AdamState.zeros_like(params)
        m = v = np.zeros(5)
        ref = p0.copy()
        for t, g in enumerate(grads, 1):
            adam_step(params, {"w": g}, state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert_allclose(params["w"], ref, rtol=1e-12)

    def test_nan_names_tensor(self):
        params = {"a": np.zeros(2), "bad": np.zeros(2)}
        with pytest.raises(NumericalError, match="bad"):
            adam_step(params, {"a": np.zeros(2), "bad": np.array([0.0, np.nan])}, AdamState.zeros_like(params), 1e-3)


class TestClip:
    def test_clips_to_norm(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_global_norm(g, 1.0) == 5.0
        assert_allclose(np.hypot(g["a"], g["b"]), 1.0, rtol=1e-6)

    def test_small_untouched(self):
        g = {"a": np.array([0.3])}
        clip_global_norm(g, 1.0)
        assert g["a"][0] == 0.3


class TestBatches:
    def test_distinct_videos_and_coverage(self):
        video_of = np.repeat(np.arange(10), 5)
        plan = plan_batches(video_of, 4, seed=0, epoch=0)
        seen = np.concatenate(plan)
        assert len(set(seen.tolist())) == len(seen)
        for b in plan:
            assert len(set(video_of[b].tolist())) == len(b) and 2 <= len(b) <= 4
        assert len(seen) >= 45

    def test_seeded(self):
        video_of = np.repeat(np.arange(10), 3)
        a = plan_batches(video_of, 4, 1, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, plan_batches(video_of, 4, 1, 2)))
        assert not all(np.array_equal(x, y) for x, y in zip(a, plan_batches(video_of, 4, 1, 3)))


class TestTrainRun:
    def test_epochs_zero_is_initialization(self, corpus):
        cfg = tiny(epochs=0)
        assert ckpt_bytes(train_run(corpus, cfg)) == ckpt_bytes(init_checkpoint(cfg, corpus))

    def test_lr_zero_keeps_parameters(self, corpus):
        cfg = tiny(lr=0.0)
        ck = train_run(corpus, cfg)
        init = init_checkpoint(cfg, corpus)
        for k in init.params:
            assert ck.params[k].tobytes() == init.params[k].tobytes(), k

    def test_deterministic(self, corpus):
        a, b = train_run(corpus, tiny()), train_run(corpus, tiny())
        assert ckpt_bytes(a) == ckpt_bytes(b)
        assert [x.line() for x in a.logs] == [x.line() for x in b.logs]

    def test_seed_matters(self, corpus):
        assert ckpt_bytes(train_run(corpus, tiny(epochs=1))) != ckpt_bytes(train_run(corpus, tiny(epochs=1, seed=1)))

    def test_logs(self, corpus):
        seen = []
        ck = train_run(corpus, tiny(), on_epoch=seen.append)
        assert [log.epoch for log in ck.logs] == [1, 2] and len(seen) == 2
        for log in ck.logs:
            assert log.text_uncertainty > 0 and log.video_uncertainty > 0
            assert all(math.isfinite(x) for x in (log.dsa, log.dua, log.kl, log.total))
            assert len(log.line().split("\t")) == 12
        assert ck.epochs_done == 2 and ck.adam.step > 0

    def test_baseline_logs_nan_dua(self, corpus):
        ck = train_run(corpus, tiny(epochs=1, alpha=0.0, beta=0.0, n_video_tokens=0, n_text_tokens=0))
        assert math.isnan(ck.logs[0].dua)

    def test_batch_too_large(self, corpus):
        with pytest.raises(ValueError, match="batch size"):
            train_run(corpus, tiny(batch_size=64))


class TestCheckpointFile:
    def test_save_load_save_identical(self, corpus, tmp_path):
        ck = train_run(corpus, tiny(epochs=1))
        ck.save(tmp_path / "a.ckpt")
        back = Checkpoint.load(tmp_path / "a.ckpt")
        back.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert back.config == ck.config and back.model == ck.model
        assert back.epochs_done == 1 and back.corpus_fingerprint == corpus.fingerprint()

    def test_magic(self, corpus, tmp_path):
        init_checkpoint(tiny(), corpus).save(tmp_path / "c.ckpt")
        assert (tmp_path / "c.ckpt").read_bytes()[:4] == b"UATV"

    def test_version_rejected(self, corpus):
        data = bytearray(ckpt_bytes(init_checkpoint(tiny(), corpus)))
        data[4:8] = (7).to_bytes(4, "little")
        with pytest.raises(tensorio.TensorFileError):
            tensorio.loads(bytes(data))

    def test_truncated_rejected(self, corpus):
        data = ckpt_bytes(init_checkpoint(tiny(), corpus))
        with pytest.raises(tensorio.TensorFileError):
            tensorio.loads(data[:-3])


class TestTensorIO:
    def test_round_trip_dtypes(self):
        t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(2.5), "c": np.arange(3),
             "d": np.zeros((0, 4))}
        back = tensorio.loads(tensorio.dumps(t))
        assert list(back) == list(t)
        for k in t:
            assert back[k].dtype == t[k].dtype and back[k].shape == t[k].shape
            assert_array_equal(back[k], t[k])

    def test_meta_round_trip(self):
        meta = {"x": 1, "y": [1.5, "s"]}
        assert tensorio.decode_meta(tensorio.encode_meta(meta)) == meta

    def test_bad_magic(self):
        data = bytearray(tensorio.dumps({"a": np.ones(2)}))
        data[0:4] = b"XXXX"
        with pytest.raises(tensorio.TensorFileError):
            tensorio.loads(bytes(data))
