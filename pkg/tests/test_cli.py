import subprocess
import sys

import numpy as np
import pytest

from uatvr import tensorio
from uatvr.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from uatvr.evaluator import parse_line
from uatvr.synthcorpus import read_corpus

COMMANDS = ["gen-data", "train", "eval", "embed", "query", "gradcheck", "explain"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Default corpus plus a flagless training run."""
    d = tmp_path_factory.mktemp("cli")
    data, ckpt = d / "c.uatc", d / "m.ckpt"
    assert main(["gen-data", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--out", str(ckpt)]) == EXIT_OK
    return data, ckpt


@pytest.fixture
def small(tmp_path):
    data = tmp_path / "s.uatc"
    assert main(["gen-data", "--out", str(data), "--videos", "20", "--seed", "2"]) == EXIT_OK
    return data


class TestHelpAndUsage:
    @pytest.mark.parametrize("cmd", COMMANDS)
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--bogus"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", "x"])
        assert exc.value.code == EXIT_USAGE

    def test_infeasible_corpus_is_usage_error(self, tmp_path, capsys, caplog):
        code, _, _ = run(capsys, "gen-data", "--out", tmp_path / "x", "--captions-per-video", 0)
        assert code == EXIT_USAGE and "captions_per_video" in caplog.text

    def test_bad_thread_env(self, monkeypatch, capsys):
        monkeypatch.setenv("UATVR_THREADS", "zero")
        assert run(capsys, "gradcheck", "--trials", 5)[0] == EXIT_USAGE

    def test_thread_env_respected(self, monkeypatch, capsys):
        monkeypatch.setenv("UATVR_THREADS", "1")
        assert run(capsys, "gradcheck", "--trials", 5)[0] == EXIT_OK


class TestDataErrors:
    def test_missing_corpus(self, tmp_path, capsys, caplog):
        code, _, _ = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "m")
        assert code == EXIT_DATA and "cannot read corpus" in caplog.text

    def test_truncated_corpus(self, small, tmp_path, capsys):
        cut = tmp_path / "cut.uatc"
        cut.write_bytes(small.read_bytes()[:100])
        assert run(capsys, "train", "--data", cut, "--out", tmp_path / "m")[0] == EXIT_DATA

    def test_corpus_passed_as_checkpoint(self, small, capsys):
        assert run(capsys, "eval", "--data", small, "--ckpt", small)[0] == EXIT_DATA

    def test_mismatched_corpus(self, trained, tmp_path, capsys):
        other = tmp_path / "o.uatc"
        main(["gen-data", "--out", str(other), "--videos", "20", "--topics", "8"])
        capsys.readouterr()
        assert run(capsys, "eval", "--data", other, "--ckpt", trained[1])[0] == EXIT_DATA


class TestGenData:
    def test_output_and_determinism(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "a", "--videos", 10, "--seed", 5)
        assert code == EXIT_OK
        path, videos, caps, test, fp = out.strip().split("\t")
        assert (int(videos), int(caps), int(test)) == (10, 50, 2)
        run(capsys, "gen-data", "--out", tmp_path / "b", "--videos", 10, "--seed", 5)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert read_corpus(tmp_path / "a").fingerprint() == fp


class TestTrainEval:
    def test_small_train_is_deterministic(self, small, tmp_path, capsys):
        args = ["--data", small, "--epochs", 2, "--batch", 8, "--dim", 16, "--k", 3, "--seed", 4]
        code, out_a, _ = run(capsys, "train", "--out", tmp_path / "a", *args)
        assert code == EXIT_OK
        _, out_b, _ = run(capsys, "train", "--out", tmp_path / "b", *args)
        assert out_a == out_b and len(out_a.strip().splitlines()) == 2
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        for line in out_a.strip().splitlines():
            parse_line(line)

    def test_batch_larger_than_split(self, small, tmp_path, capsys):
        assert run(capsys, "train", "--data", small, "--out", tmp_path / "m", "--batch", 64)[0] == EXIT_USAGE

    def test_eval_round_trip(self, trained, capsys):
        code, out, _ = run(capsys, "eval", "--data", trained[0], "--ckpt", trained[1])
        assert code == EXIT_OK
        line = out.strip()
        values, metrics = parse_line(line)
        assert values["epoch"] == 5
        from uatvr.evaluator import format_line
        assert format_line(int(values["epoch"]), values["L_DSA"], values["L_DUA"], values["L_KL"], values["total"],
                           values["textUnc"], values["videoUnc"], metrics) == line

    def test_eval_above_chance(self, trained, capsys):
        _, out, _ = run(capsys, "eval", "--data", trained[0], "--ckpt", trained[1])
        assert parse_line(out.strip())[1].recall[1] >= 5 * 2.0

    def test_eval_v2t_and_ranks(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--data", trained[0], "--ckpt", trained[1], "--direction", "v2t",
                           "--ranks", tmp_path / "r.tsv")
        assert code == EXIT_OK
        rows = [tuple(map(int, line.split("\t"))) for line in (tmp_path / "r.tsv").read_text().splitlines()]
        assert len(rows) == 50 and all(1 <= r <= 250 for _, _, r in rows)

    def test_eval_fused(self, trained, capsys):
        assert run(capsys, "eval", "--data", trained[0], "--ckpt", trained[1], "--mode", "fused")[0] == EXIT_OK


class TestEmbed:
    def test_tensors(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "embed", "--data", trained[0], "--ckpt", trained[1], "--out", tmp_path / "e")
        assert code == EXIT_OK
        t = tensorio.load(tmp_path / "e")
        assert t["text.mu"].shape == (250, 32) and t["video.mu"].shape == (50, 32)
        assert t["video.tokens"].shape == (50, 15, 32) and t["text.tokens"].shape == (250, 18, 32)
        np.testing.assert_allclose(np.linalg.norm(t["text.mu"], axis=1), 1.0, atol=1e-5)
        assert len(out.strip().splitlines()) == len(t)


class TestQuery:
    def test_training_caption_finds_its_video(self, trained, capsys):
        corpus = read_corpus(trained[0])
        hits = 0
        # whole-video captions; a 2-3 token entity fragment legitimately matches many videos
        probes = [q for q in corpus.caption_indices("train") if corpus.captions[q].granularity == "global"][::12]
        for q in probes:
            cap = corpus.captions[q]
            words = cap.seq.ids[cap.seq.mask][1:]
            code, out, _ = run(capsys, "query", "--ckpt", trained[1], "--data", trained[0],
                               "--tokens", ",".join(map(str, words)))
            assert code == EXIT_OK
            lines = [line.split("\t") for line in out.strip().splitlines()]
            assert [int(r[0]) for r in lines] == list(range(1, 11))
            hits += cap.video_index in [int(r[1]) for r in lines]
        assert hits >= 0.75 * len(probes)

    def test_bad_tokens(self, trained, capsys):
        assert run(capsys, "query", "--ckpt", trained[1], "--data", trained[0], "--tokens", "1,5")[0] == EXIT_USAGE
        assert run(capsys, "query", "--ckpt", trained[1], "--data", trained[0], "--tokens", "a,b")[0] == EXIT_USAGE


class TestGradcheck:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        fields = out.strip().split("\t")
        assert code == EXIT_OK and fields[0] == "maxRelErr" and float(fields[1]) <= 1e-5
        assert fields[-2] == "checked"

    def test_huge_eps_fails_numerically(self, capsys):
        assert run(capsys, "gradcheck", "--eps", 0.5, "--trials", 30)[0] == EXIT_NUMERIC


class TestExplain:
    def test_output(self, trained, capsys):
        code, out, _ = run(capsys, "explain", "--ckpt", trained[1], "--data", trained[0], "--pair", "0,0")
        assert code == EXIT_OK
        lines = [line.split("\t") for line in out.strip().splitlines()]
        assert lines[0][0] == "score"
        frames = [r for r in lines if r[0] == "frame"]
        assert len(frames) == 15 and [r[2] for r in frames[:3]] == ["extra"] * 3
        assert abs(sum(float(r[3]) for r in frames) - 1) <= 1e-9

    def test_out_of_range(self, trained, capsys):
        assert run(capsys, "explain", "--ckpt", trained[1], "--data", trained[0], "--pair", "0,999")[0] == EXIT_USAGE


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "uatvr.cli", "gradcheck", "--trials", "10"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.startswith("maxRelErr")
