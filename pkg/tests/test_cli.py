import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from vaeloop.cli import run
from vaeloop.synthesis import load_sequence
from vaeloop.training import Checkpoint

SMALL = """\
# tiny model for fast tests
epochs = 1
lr = 1e-3
model.d_buf = 8
model.k = 3
model.d_p = 8
model.d_z = 4
model.hidden = 16
model.att_hidden = 8
model.enc_channels = 8,8,8,8,8
model.enc_hidden = 16
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text(SMALL)
    assert run(["gen-data", "--out", str(d / "d.vld"), "--count", "70", "--seed", "7"]) == 0
    assert run(["train", "--data", str(d / "d.vld"), "--out", str(d / "m.vlck"),
                "--config", str(d / "small.cfg"), "--seed", "7", "--stf-noise", "0.1"]) == 0
    return d


def test_train_outputs(workdir):
    ck = Checkpoint.load(workdir / "m.vlck")
    assert ck.config.total_epochs == 1 and ck.config.model.d_z == 4
    assert ck.config.seed == 7 and ck.config.stf_noise_scale == 0.1
    assert (workdir / "m.vlck.best").exists()
    rows = list(csv.DictReader(open(workdir / "m.vlck.log.csv")))
    assert [r["split"] for r in rows] == ["train", "validation"]


def test_eval_prints_log_rows(workdir, capsys):
    assert run(["eval", "--checkpoint", str(workdir / "m.vlck"), "--data",
                str(workdir / "d.vld"), "--split", "all"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["split"] for r in rows] == ["train", "validation", "test"]
    assert all(float(r["total"]) > 0 for r in rows)


def test_encode_csv(workdir, tmp_path):
    out = tmp_path / "z.csv"
    assert run(["encode", "--checkpoint", str(workdir / "m.vlck"), "--data",
                str(workdir / "d.vld"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 70 and "mu_3" in rows[0] and float(rows[0]["sigma_0"]) > 0


def test_sigma_zero_synthesis_is_byte_identical(workdir, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"s{i}.vlsq"
        assert run(["synthesize", "--checkpoint", str(workdir / "m.vlck"), "--phonemes",
                    "1,2,3,4", "--sigma", "0", "--seed", str(i), "--out", str(out),
                    "--csv", str(tmp_path / f"s{i}.csv")]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "s0.csv").read_text() == (tmp_path / "s1.csv").read_text()


def test_sigma_zero_identical_across_processes(workdir, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"p{i}.vlsq"
        subprocess.run([sys.executable, "-m", "vaeloop", "synthesize", "--checkpoint",
                        str(workdir / "m.vlck"), "--phonemes", "5,6,7", "--sigma", "0",
                        "--out", str(out)], check=True)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_synthesize_with_z_file_and_export(workdir, tmp_path):
    zf = tmp_path / "z.txt"
    zf.write_text("0.5, -0.5, 1, 0")
    (tmp_path / "ph.txt").write_text("3,3,9")
    seq = tmp_path / "s.vlsq"
    assert run(["synthesize", "--checkpoint", str(workdir / "m.vlck"), "--phonemes",
                f"@{tmp_path / 'ph.txt'}", "--z", f"@{zf}", "--out", str(seq)]) == 0
    out = tmp_path / "t.csv"
    assert run(["export-traj", "--seq", str(seq), "--channel", "2", "--out", str(out)]) == 0
    values = [float(r["value"]) for r in csv.DictReader(open(out))]
    np.testing.assert_array_equal(values, load_sequence(seq)[:, 2])
    zf.write_text("1,2")
    assert run(["synthesize", "--checkpoint", str(workdir / "m.vlck"), "--phonemes", "1",
                "--z", f"@{zf}", "--out", str(seq)]) == 2


def test_interpolate(workdir, tmp_path, capsys):
    prefix = tmp_path / "i"
    d = str(workdir / "d.vld")
    assert run(["interpolate", "--checkpoint", str(workdir / "m.vlck"), "--a", f"{d}:0",
                "--b", f"{d}:5", "--phonemes", "1,2", "--alphas", "0,0.5,1",
                "--out-prefix", str(prefix)]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["alpha"] for r in rows] == ["0", "0.5", "1"]
    for r in rows:
        assert len(load_sequence(r["path"])) == int(r["frames"])


def test_invalid_lr_names_flag(workdir, capsys):
    code = run(["train", "--data", str(workdir / "d.vld"), "--out", "x.vlck", "--lr", "0"])
    assert code == 1
    assert "--lr" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert run(["gen-data"]) == 1
    assert "--out" in capsys.readouterr().err


def test_flags_override_config(workdir, tmp_path):
    out = tmp_path / "m2.vlck"
    assert run(["train", "--data", str(workdir / "d.vld"), "--out", str(out), "--config",
                str(workdir / "small.cfg"), "--lr", "5e-5", "--epochs", "1"]) == 0
    assert Checkpoint.load(out).config.learning_rate == 5e-5


def test_unknown_config_key_rejected(workdir, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 1\nlearning_rate_typo = 3\n")
    assert run(["train", "--data", str(workdir / "d.vld"), "--out", str(tmp_path / "m"),
                "--config", str(cfg)]) == 1
    assert "learning_rate_typo" in capsys.readouterr().err


def test_bad_dataset_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.vld"
    bad.write_bytes(b"VLD1\x01\x00\x00\x00garbage")
    assert run(["train", "--data", str(bad), "--out", str(tmp_path / "m")]) == 2
    assert "byte offset" in capsys.readouterr().err


def test_bad_checkpoint_exits_2(tmp_path):
    bad = tmp_path / "bad.vlck"
    bad.write_bytes(b"nothing here")
    assert run(["synthesize", "--checkpoint", str(bad), "--phonemes", "1",
                "--out", str(tmp_path / "s")]) == 2


def test_help_documents_formats(capsys):
    for cmd in ("train", "synthesize"):
        with pytest.raises(SystemExit) as exc:
            run([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for magic in ("VLD1", "VLCK", "VLSQ"):
            assert magic in text
