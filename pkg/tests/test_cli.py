import csv
import io
import json
import os

import numpy as np
import pytest

from protomts.cli import main
from protomts.training import load_model, model_for, pretrain_encoders, save_model
from protomts.tsfile import load_ts, write_ts
from toy import TINY, toy

TINY_FLAGS = [
    "--epochs-stage1", "2", "--epochs-stage2", "3", "--epochs-stage3", "3",
    "--batch-size", "8", "--pairs-per-epoch", "32",
    "--single-prototypes", "2", "--multi-prototypes", "4", "--hidden", "4", "--seed", "3",
]


@pytest.fixture()
def toy_dir(tmp_path):
    d = tmp_path / "toy"
    d.mkdir()
    data = toy()
    write_ts(data.subset(np.arange(30)), d / "train.ts")
    write_ts(data.subset(np.arange(30, 36)), d / "test.ts")
    return d


@pytest.fixture()
def trained_file(toy_dir, tmp_path):
    out = tmp_path / "m.zip"
    assert main(["train", "--data", str(toy_dir), "--out", str(out)] + TINY_FLAGS) == 0
    return out


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- synth ---------------------------------------------------------------------
def test_synth_default_counts(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    train, test = load_ts(tmp_path / "train.ts"), load_ts(tmp_path / "test.ts")
    assert len(train) + len(test) == 6400
    assert len(test) == 1280
    assert train.d == 4 and train.n == 128
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 0 and manifest["train_samples"] == 5120


def test_synth_byte_identical(tmp_path):
    args = ["--samples-per-class", "2", "--seed", "4"]
    assert main(["synth", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["synth", "--out", str(tmp_path / "b")] + args) == 0
    for name in ("train.ts", "test.ts", "manifest.json"):
        assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)


def test_bad_flag_usage(capsys):
    assert main(["synth", "--no-such-flag"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["synth", "--out", "x", "--seed", "abc"]) == 2


def test_synth_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--samples-per-class", "1", "--out", str(blocker / "sub")]) == 2
    assert "error" in capsys.readouterr().err


def test_synth_invalid_config():
    assert main(["synth", "--out", "unused", "--series-length", "10"]) == 2


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert main(["--version"]) == 0


# -- train ---------------------------------------------------------------------
def test_train_writes_model_log_and_accuracy(toy_dir, tmp_path, capsys):
    out, log = tmp_path / "m.zip", tmp_path / "log.csv"
    assert main(["train", "--data", str(toy_dir), "--out", str(out), "--log", str(log)] + TINY_FLAGS) == 0
    assert "hold-out accuracy" in capsys.readouterr().out
    model = load_model(out)
    assert model.complete and model.config.hidden == 4
    with open(log, newline="") as fh:
        stages = {row["stage"] for row in csv.DictReader(fh)}
    assert stages == {"1", "2", "3"}
    for stage in (1, 2, 3):
        assert os.path.isfile(f"{out}.stage{stage}")


def test_train_deterministic(toy_dir, tmp_path, trained_file):
    other = tmp_path / "again.zip"
    assert main(["train", "--data", str(toy_dir), "--out", str(other)] + TINY_FLAGS) == 0
    assert read(other) == read(trained_file)


def test_train_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m.zip")]) == 2


def test_train_resume_skips_stages(toy_dir, tmp_path, trained_file, capsys):
    ck = f"{trained_file}.stage2"
    out = tmp_path / "resumed.zip"
    log = tmp_path / "log.csv"
    args = ["train", "--data", str(toy_dir), "--out", str(out), "--resume", ck, "--log", str(log)]
    assert main(args + TINY_FLAGS) == 0
    with open(log, newline="") as fh:
        assert {row["stage"] for row in csv.DictReader(fh)} == {"3"}
    assert read(out) == read(trained_file)


def test_config_file_and_flag_precedence(toy_dir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# tiny run\nhidden = 3\nmulti-prototypes=5\nlambda-coverage = 0.5\n")
    out = tmp_path / "m.zip"
    flags = [f for f in TINY_FLAGS]
    i = flags.index("--multi-prototypes")
    del flags[i : i + 2]
    i = flags.index("--hidden")
    del flags[i : i + 2]
    assert main(["train", "--data", str(toy_dir), "--out", str(out), "--config", str(cfg), "--hidden", "2"] + flags) == 0
    model = load_model(out)
    assert model.config.hidden == 2
    assert model.config.multi_prototypes == 5
    assert model.config.weights.coverage == 0.5


@pytest.mark.parametrize("text", ["bogus = 1\n", "hidden\n", "hidden = many\n", "hidden = 0\n"])
def test_bad_config_file(toy_dir, tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["train", "--data", str(toy_dir), "--out", str(tmp_path / "m.zip"), "--config", str(cfg)]) == 2


def test_train_malformed_data(tmp_path):
    (tmp_path / "train.ts").write_text("@problemName x\n1,2:a\n")
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m.zip")]) == 2


def test_resume_config_mismatch_is_state_error(toy_dir, tmp_path, trained_file):
    ck = f"{trained_file}.stage1"
    args = ["train", "--data", str(toy_dir), "--out", str(tmp_path / "r.zip"), "--resume", ck]
    flags = TINY_FLAGS[:-2] + ["--seed", "9"]
    assert main(args + flags) == 3


# -- eval ----------------------------------------------------------------------
def test_eval_prints_confusion(toy_dir, trained_file, capsys):
    assert main(["eval", "--model", str(trained_file), "--data", str(toy_dir)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("accuracy ")
    rows = [line.split(",") for line in out.splitlines() if "," in line]
    assert rows[0] == ["true\\pred", "a", "b", "c"]
    assert [sum(int(v) for v in r[1:]) for r in rows[1:]] == [2, 2, 2]


def test_eval_confusion_file(toy_dir, trained_file, tmp_path):
    path = tmp_path / "conf.csv"
    assert main(["eval", "--model", str(trained_file), "--data", str(toy_dir / "test.ts"), "--confusion", str(path)]) == 0
    assert len(path.read_text().splitlines()) == 4


def test_eval_incomplete_model(toy_dir, tmp_path):
    data = load_ts(toy_dir / "train.ts")
    model = model_for(data, TINY)
    pretrain_encoders(model, data)
    path = tmp_path / "partial.zip"
    save_model(model, path)
    assert main(["eval", "--model", str(path), "--data", str(toy_dir)]) == 3


def test_eval_corrupt_model(toy_dir, tmp_path):
    path = tmp_path / "junk.zip"
    path.write_bytes(b"not a zip")
    assert main(["eval", "--model", str(path), "--data", str(toy_dir)]) == 3


# -- interpret -----------------------------------------------------------------
def test_interpret_outputs_deterministic(toy_dir, trained_file, tmp_path):
    for name in ("a", "b"):
        assert main(["interpret", "--model", str(trained_file), "--data", str(toy_dir), "--out", str(tmp_path / name)]) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["encodings_var0.csv", "encodings_var1.csv", "report.json"]
    for f in files:
        assert read(tmp_path / "a" / f) == read(tmp_path / "b" / f)
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(doc["single"]) == 4 and len(doc["multi"]) == 4
    rows = io.StringIO((tmp_path / "a" / "encodings_var0.csv").read_text()).readlines()
    assert len(rows) == 31


def test_interpret_unwritable(toy_dir, trained_file, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["interpret", "--model", str(trained_file), "--data", str(toy_dir), "--out", str(blocker / "x")]) == 2


def test_resume_without_flags_uses_checkpoint_config(toy_dir, tmp_path, trained_file):
    out = tmp_path / "r.zip"
    assert main(["train", "--data", str(toy_dir), "--out", str(out), "--resume", f"{trained_file}.stage2"]) == 0
    assert read(out) == read(trained_file)
