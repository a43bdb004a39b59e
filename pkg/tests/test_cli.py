import csv
import subprocess
import sys

import numpy as np
import pytest

from segwright import pipeline as pl
from segwright.audio_io import AudioBuffer, write_audio
from segwright.cli import main
from segwright.segmentation import read_segments


def run(*argv):
    return main([str(a) for a in argv])


def usage_code(*argv):
    with pytest.raises(SystemExit) as exc:
        run(*argv)
    return exc.value.code


@pytest.fixture(scope="module")
def tone_wav(tmp_path_factory):
    d = tmp_path_factory.mktemp("tone")
    sr = 16000
    t = np.arange(2 * sr) / sr
    x = np.where(t >= 1.0, 0.3 * np.sin(2 * np.pi * 300 * t), 0.0)
    write_audio(d / "a.wav", AudioBuffer(x, sr))
    return d / "a.wav"


@pytest.fixture(scope="module")
def scripted(tmp_path_factory):
    """make-corpus -> train-cnn -> fit-gmm-hmm -> tune -> segment -> evaluate."""
    d = tmp_path_factory.mktemp("e2e")
    assert run("make-corpus", "--out", d / "train", "--seconds", 60, "--seed", 1, "--file-sec", 30) == 0
    assert run("make-corpus", "--out", d / "calib", "--seconds", 120, "--seed", 1, "--stream", 2) == 0
    assert run("make-corpus", "--out", d / "test", "--seconds", 30, "--seed", 1, "--stream", 1) == 0
    assert run("train-cnn", "--data", d / "train", "--out", d / "m.sgwt", "--epochs", 3, "--seed", 1,
               "--frame-stride", 8) == 0
    assert run("fit-gmm-hmm", "--data", d / "train", "--model", d / "m.sgwt", "--out", d / "g.txt") == 0
    assert run("tune", "--method", "cnn-gmm-hmm", "--model", d / "m.sgwt", "--smoother", d / "g.txt",
               "--data", d / "calib", "--out", d / "op.txt") == 0
    assert run("segment", "--method", "cnn-gmm-hmm", "--model", d / "m.sgwt", "--smoother", d / "g.txt",
               "--operating-point", d / "op.txt", "--in", d / "test", "--out", d / "seg.csv",
               "--decisions-out", d / "dec.txt", "--jobs", 1) == 0
    assert run("evaluate", "--hyp", f"gmm={d / 'dec.txt'}", "--ref", d / "test" / "labels.csv",
               "--audio-dir", d / "test", "--out", d / "report.csv") == 0
    return d


def test_energy_happy_path(tone_wav, tmp_path):
    out = tmp_path / "a.csv"
    assert run("segment", "--method", "energy", "--in", tone_wav, "--out", out) == 0
    segs = read_segments(out)
    assert len(segs) == 1
    assert segs[0].start_sec == pytest.approx(1.0, abs=0.02)
    assert segs[0].end_sec == pytest.approx(2.0, abs=0.02)


def test_rttm_format(tone_wav, tmp_path):
    out = tmp_path / "a.rttm"
    assert run("segment", "--method", "energy", "--in", tone_wav, "--out", out, "--format", "rttm") == 0
    assert out.read_text().startswith("SPEAKER a 1 ")


def test_missing_smoother_is_usage_error(tone_wav, tmp_path):
    assert usage_code("segment", "--method", "cnn-hmm", "--model", tmp_path / "m.sgwt",
                      "--in", tone_wav, "--out", tmp_path / "x.csv") == 2
    assert not (tmp_path / "x.csv").exists()


def test_energy_with_model_is_usage_error(tone_wav, tmp_path):
    assert usage_code("segment", "--method", "energy", "--model", tmp_path / "m.sgwt",
                      "--in", tone_wav, "--out", tmp_path / "x.csv") == 2


def test_control_flag_for_wrong_method(tone_wav, tmp_path):
    assert usage_code("segment", "--method", "energy", "--threshold", "0.5",
                      "--in", tone_wav, "--out", tmp_path / "x.csv") == 2


def test_unknown_subcommand():
    assert usage_code("frobnicate") == 2


def test_runtime_failure_single_line(tmp_path, capsys):
    assert run("segment", "--method", "energy", "--in", tmp_path / "missing.wav", "--out", tmp_path / "x.csv") == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("segwright: error:")
    assert "\n" not in err


def test_version_mismatched_model(tone_wav, scripted, tmp_path):
    data = bytearray((scripted / "m.sgwt").read_bytes())
    data[4] = 99
    (tmp_path / "bad.sgwt").write_bytes(bytes(data))
    code = run("segment", "--method", "cnn", "--model", tmp_path / "bad.sgwt", "--in", tone_wav,
               "--out", tmp_path / "x.csv")
    assert code == 1


def test_wrong_smoother_kind(tone_wav, scripted, tmp_path):
    code = run("segment", "--method", "cnn-hmm", "--model", scripted / "m.sgwt", "--smoother", scripted / "g.txt",
               "--in", tone_wav, "--out", tmp_path / "x.csv")
    assert code == 1


def test_scripted_run_report_parses(scripted):
    rows = list(csv.DictReader((scripted / "report.csv").open()))
    assert [r["system"] for r in rows] == ["gmm"]
    assert list(rows[0]) == ["system", "clean", "noise", "music", "all", "fpr"]
    assert 0.0 <= float(rows[0]["all"]) <= 1.0
    op = (scripted / "op.txt").read_text()
    assert "method = cnn-gmm-hmm" in op and "converged = true" in op


def test_segments_and_decisions_agree(scripted):
    decisions = pl.read_decisions(scripted / "dec.txt")
    segs = read_segments(scripted / "seg.csv")
    assert set(decisions) == {s.file_id for s in segs}


def test_parallel_output_matches_serial(scripted, tmp_path):
    common = ["segment", "--method", "cnn", "--model", scripted / "m.sgwt", "--in", scripted / "calib"]
    assert run(*common, "--out", tmp_path / "one.csv", "--jobs", 1) == 0
    assert run(*common, "--out", tmp_path / "two.csv", "--jobs", 2) == 0
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()


def test_evaluate_segments_and_ranking(scripted, tmp_path, capsys):
    test = scripted / "test"
    assert run("segment", "--method", "energy", "--in", test, "--out", tmp_path / "e.csv") == 0
    code = run("evaluate", "--hyp", f"gmm={scripted / 'seg.csv'}", "--hyp", f"energy={tmp_path / 'e.csv'}",
               "--ref", test / "labels.csv", "--audio-dir", test, "--fpr-tol", "1.0", "--out", tmp_path / "r.csv")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    assert {r["system"] for r in rows} == {"gmm", "energy"}
    assert "system" in capsys.readouterr().out


def test_tune_miss_fails_without_allow_miss(scripted, tmp_path):
    args = ["tune", "--method", "energy", "--data", scripted / "test", "--tol", "0", "--max-iter", "3",
            "--out", tmp_path / "op.txt"]
    assert run(*args) == 1
    assert not (tmp_path / "op.txt").exists()
    assert run(*args, "--allow-miss") == 0
    assert "converged = false" in (tmp_path / "op.txt").read_text()


def test_module_entry_point(tone_wav, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "segwright", "segment", "--method", "cnn-hmm", "--in", str(tone_wav),
         "--out", str(tmp_path / "x.csv")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert "--model" in proc.stderr
