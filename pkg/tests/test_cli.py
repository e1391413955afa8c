import csv
import json

import numpy as np
import pytest

from conftest import sine
from sifisinger import dsp
from sifisinger.cli import main


@pytest.fixture(scope="module")
def trained(prepared_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--preset", "tiny", "--data", str(prepared_corpus), "--out", str(out), "--steps", "2",
                 "--no-diff-recon", "--no-am-source", "--train.log_every=1"])
    assert code == 0
    return out


def test_train_writes_artifacts(trained):
    assert (trained / "final.pt").exists() and (trained / "config.yaml").exists()
    rows = [json.loads(line) for line in (trained / "losses.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert "L_F0" not in rows[0]
    assert "am_source: false" in (trained / "config.yaml").read_text()


def test_synthesize_one_wav_per_line(trained, prepared_corpus, tmp_path):
    score = prepared_corpus.parent / "raw" / "transcriptions.txt"
    lines = [l for l in score.read_text().splitlines() if l.strip()]
    assert main(["synthesize", "--score", str(score), "--ckpt", str(trained / "final.pt"),
                 "--out-dir", str(tmp_path), "--seed", "1"]) == 0
    wavs = sorted(tmp_path.glob("*.wav"))
    assert len(wavs) == len(lines)
    ids = {l.split("|")[0] for l in lines}
    assert {w.stem for w in wavs} == ids
    w = dsp.load_wav(wavs[0])
    assert len(w.samples) % 512 == 0 and np.abs(w.samples).max() <= 1.0


def test_synthesize_is_seeded(trained, prepared_corpus, tmp_path):
    score = prepared_corpus.parent / "raw" / "transcriptions.txt"
    for d in ("a", "b"):
        main(["synthesize", "--score", str(score), "--ckpt", str(trained / "final.pt"), "--out-dir",
              str(tmp_path / d), "--seed", "3"])
    for p in (tmp_path / "a").glob("*.wav"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def _write_pair(tmp_path, f_ref, f_syn):
    for d, f in (("ref", f_ref), ("syn", f_syn)):
        (tmp_path / d).mkdir()
        dsp.save_wav(tmp_path / d / "u1.wav", sine(f, 0.5))


def test_evaluate_identical_dirs(tmp_path):
    _write_pair(tmp_path, 220.0, 220.0)
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--ref-dir", str(tmp_path / "ref"), "--syn-dir", str(tmp_path / "syn"),
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["utt_id"] for r in rows] == ["u1", "mean"]
    assert list(rows[0]) == ["utt_id", "f0_rmse_hz", "mel_rmse", "f0_corr", "vuv_pct"]
    assert float(rows[0]["f0_rmse_hz"]) == 0.0 and float(rows[0]["mel_rmse"]) == 0.0
    assert float(rows[0]["vuv_pct"]) == 0.0


def test_evaluate_detects_pitch_offset(tmp_path):
    _write_pair(tmp_path, 220.0, 240.0)
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--ref-dir", str(tmp_path / "ref"), "--syn-dir", str(tmp_path / "syn"),
                 "--out", str(out)]) == 0
    row = next(csv.DictReader(out.open()))
    assert float(row["f0_rmse_hz"]) == pytest.approx(20.0, abs=2.0)


def test_plot_command(tmp_path):
    dsp.save_wav(tmp_path / "a.wav", sine(300.0, 0.5))
    assert main(["plot", "--wav", str(tmp_path / "a.wav"), "--out", str(tmp_path / "a.png")]) == 0
    assert (tmp_path / "a.png").stat().st_size > 0 and (tmp_path / "a.png.json").exists()


@pytest.mark.parametrize("argv", [
    ["evaluate", "--ref-dir", "/nonexistent", "--syn-dir", "/nonexistent"],
    ["train", "--data", "/nonexistent", "--out", "/tmp/x"],
    ["synthesize", "--score", "/nonexistent", "--ckpt", "/nonexistent", "--out-dir", "/tmp/x"],
    ["plot", "--wav", "/x.wav", "--out", "/tmp/x.png", "--bogus"],
    ["evaluate", "--ref-dir", ".", "--syn-dir", ".", "--train.nope=1"],
    ["frobnicate"],
])
def test_user_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err.strip()
    assert err and "\n" not in err


def test_train_requires_pitch_net(prepared_corpus, tmp_path):
    assert main(["train", "--preset", "tiny", "--data", str(prepared_corpus), "--out", str(tmp_path)]) == 1
