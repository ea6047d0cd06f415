import json
import math

import numpy as np
import pytest

from eend.cli import main
from eend.config import ConfigError, DEFAULTS, emit, parse_config_text, resolve
from eend.score import parse_rttm


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_args():
    """Overrides that keep CLI runs fast."""
    return [
        "--set", "corpus.speakers=4", "--set", "corpus.utts_per_speaker=3",
        "--set", "corpus.utt_min=0.4", "--set", "corpus.utt_max=0.8",
        "--set", "corpus.noise_dur=1.0",
        "--set", "simulate.umin=2", "--set", "simulate.umax=3",
        "--set", "simulate.beta=0.7",
    ]


@pytest.fixture(scope="module")
def mixture_dir(tmp_path_factory, small_args):
    out = tmp_path_factory.mktemp("mixes")
    assert run("simulate", "--out", out, "-n", 3, "--seed", 5, *small_args) == 0
    return out


class TestConfig:
    def test_round_trip(self):
        cfg = resolve()
        text = emit(cfg)
        back = parse_config_text(text)
        for key in DEFAULTS:
            assert back[key] == cfg[key]

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("model.banana = 3")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("train.epochs = soon")

    def test_override_precedence(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("train.epochs = 7\n")
        cfg = resolve(f, ["train.epochs=9"])
        assert cfg["train.epochs"] == 9

    def test_inf_snr(self):
        cfg = resolve(None, ["simulate.snrs=inf"])
        assert cfg["simulate.snrs"] == (math.inf,)

    def test_comments_ignored(self):
        assert parse_config_text("# a comment\n\nseed = 3\n") == {"seed": 3}


class TestSimulateCmd:
    def test_outputs_exist(self, mixture_dir):
        assert (mixture_dir / "mix_00000.wav").exists()
        assert (mixture_dir / "mix_00000.rttm").exists()
        assert (mixture_dir / "metadata.jsonl").exists()
        resolved = (mixture_dir / "config.resolved").read_text()
        assert resolved.startswith("# eend ")
        assert "simulate.beta = 0.7" in resolved

    def test_deterministic_across_runs(self, tmp_path, small_args):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("simulate", "--out", a, "-n", 2, "--seed", 7, *small_args) == 0
        assert run("simulate", "--out", b, "-n", 2, "--seed", 7, *small_args) == 0
        for name in ("mix_00000.wav", "mix_00001.wav", "mix_00000.rttm",
                     "metadata.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_bad_beta_exits_2(self, tmp_path, capsys):
        code = run("simulate", "--out", tmp_path / "x", "--beta", "-1")
        assert code == 2
        assert "beta" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        code = run("simulate", "--out", tmp_path / "x", "--set", "nope=1")
        assert code == 2
        assert "nope" in capsys.readouterr().err

    def test_metadata_overlap_tracks_beta(self, tmp_path, small_args):
        # the --beta flag takes precedence over --set overrides
        dense, sparse = tmp_path / "dense", tmp_path / "sparse"
        assert run("simulate", "--out", dense, "-n", 6, "--seed", 3,
                   "--beta", 0.4, *small_args) == 0
        assert run("simulate", "--out", sparse, "-n", 6, "--seed", 3,
                   "--beta", 6.0, *small_args) == 0

        def mean_overlap(path):
            rows = [json.loads(line) for line in
                    (path / "metadata.jsonl").read_text().splitlines()]
            return sum(r["overlap_ratio"] for r in rows) / len(rows)

        assert mean_overlap(dense) > mean_overlap(sparse)

    def test_parallel_jobs_identical(self, tmp_path, small_args):
        a, b = tmp_path / "j1", tmp_path / "j2"
        assert run("simulate", "--out", a, "-n", 2, "--seed", 9, *small_args) == 0
        assert run("simulate", "--out", b, "-n", 2, "--seed", 9, "--jobs", 2,
                   *small_args) == 0
        for name in ("mix_00000.wav", "mix_00001.wav", "metadata.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory, mixture_dir):
    out = tmp_path_factory.mktemp("run")
    code = run("train", "--data", mixture_dir, "--out", out,
               "--epochs", 2, "--seed", 1,
               "--set", "model.dim=16", "--set", "model.ffn=32",
               "--set", "train.batch=2", "--set", "train.warmup=10",
               "--set", "train.average=2")
    assert code == 0
    return out / "averaged.eend"


class TestTrainCmd:
    def test_artifacts(self, trained_model):
        run_dir = trained_model.parent
        history = (run_dir / "history.csv").read_text().strip().splitlines()
        assert history[0] == "epoch,train_loss,valid_loss,lr"
        assert len(history) == 3
        assert (run_dir / "epoch001.eend").exists()
        assert (run_dir / "config.resolved").exists()
        from eend.model import load_params
        cfg, params = load_params(trained_model)
        assert cfg.model_dim == 16

    def test_missing_data_dir_fails(self, tmp_path):
        assert run("train", "--data", tmp_path / "void", "--out", tmp_path / "o") == 1


class TestInferScoreCmds:
    def test_infer_and_score(self, tmp_path, trained_model, mixture_dir):
        hyp = tmp_path / "hyp.rttm"
        assert run("infer", "--model", trained_model, mixture_dir,
                   "--out", hyp) == 0
        json_out = tmp_path / "report.json"
        code = run("score", "--ref", mixture_dir, "--hyp", hyp,
                   "--json-out", json_out)
        assert code == 0
        report = json.loads(json_out.read_text())
        assert set(report) == {"der", "mi", "fa", "cf", "sad_mi", "sad_fa",
                               "scored_time"}
        assert abs(report["der"] - (report["mi"] + report["fa"] + report["cf"])) < 1e-9

    def test_infer_silence_gives_empty_rttm(self, tmp_path, trained_model):
        from eend.audio import Waveform, write_wav
        wav = tmp_path / "quiet.wav"
        write_wav(wav, Waveform(np.zeros(16000), 8000))
        out = tmp_path / "quiet.rttm"
        assert run("infer", "--model", trained_model, wav, "--out", out,
                   "--threshold", "0.99") == 0
        assert out.read_text() == ""

    def test_threshold_monotone_speech_time(self, tmp_path, trained_model,
                                            mixture_dir):
        def total_time(threshold):
            out = tmp_path / f"h{int(threshold * 100)}.rttm"
            assert run("infer", "--model", trained_model, mixture_dir,
                       "--out", out, "--threshold", threshold) == 0
            return sum(r.duration for r in parse_rttm(out.read_text()))

        assert total_time(0.6) <= total_time(0.5)

    def test_score_ref_equals_hyp_is_zero(self, tmp_path, mixture_dir, capsys):
        code = run("score", "--ref", mixture_dir, "--hyp", mixture_dir,
                   "--collar", "0.25")
        assert code == 0
        out = capsys.readouterr().out
        assert '"der": 0.0' in out

    def test_score_missing_recording_in_dir_exits_2(self, tmp_path, mixture_dir,
                                                    capsys):
        partial = tmp_path / "partialdir"
        partial.mkdir()
        (partial / "mix_00000.rttm").write_text(
            (mixture_dir / "mix_00000.rttm").read_text())
        code = run("score", "--ref", mixture_dir, "--hyp", partial)
        assert code == 2
        assert "mix_00001" in capsys.readouterr().err

    def test_score_single_file_missing_id_counts_as_miss(self, tmp_path,
                                                         mixture_dir, capsys):
        partial = tmp_path / "partial.rttm"
        partial.write_text((mixture_dir / "mix_00000.rttm").read_text())
        assert run("score", "--ref", mixture_dir, "--hyp", partial) == 0
        out = capsys.readouterr().out
        assert '"mi":' in out and '"der": 0.0' not in out

    def test_score_unknown_hyp_id_exits_2(self, tmp_path, mixture_dir, capsys):
        rogue = tmp_path / "rogue.rttm"
        rogue.write_text("SPEAKER ghost 1 0.000 1.000 <NA> <NA> a <NA> <NA>\n")
        code = run("score", "--ref", mixture_dir, "--hyp", rogue)
        assert code == 2
        assert "ghost" in capsys.readouterr().err

    def test_bad_rttm_exits_1(self, tmp_path, mixture_dir, capsys):
        bad = tmp_path / "bad.rttm"
        bad.write_text("SPEAKER only nine fields here x x x x x\n")
        assert run("score", "--ref", mixture_dir, "--hyp", bad) == 1


class TestVizCmd:
    def test_viz_writes_heads(self, tmp_path, trained_model, mixture_dir):
        out = tmp_path / "viz"
        assert run("viz", "--model", trained_model,
                   mixture_dir / "mix_00000.wav", "--block", 2,
                   "--out", out) == 0
        pgms = sorted(out.glob("*.pgm"))
        assert len(pgms) == 4
        csvs = sorted(out.glob("*.csv"))
        mat = np.loadtxt(csvs[0], delimiter=",")
        assert np.all(np.abs(mat.sum(axis=1) - 1.0) < 1e-6)


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert out.count("[ok]") == 3
